use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::layers::{
    pairwise_corr_pool_backward, pairwise_corr_pool_forward, relu_backward, relu_forward, Conv2d, ConvCache,
};
use super::{PairTensor, Scalar, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer hyperparameters of a pair-wise correlation network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub input_channels: usize,
    pub convs: Vec<ConvSpec>,
}

impl Default for ArchDescriptor {
    /// 32 3x3/2, 64 3x3/2, 64 3x3/1, valid padding, ReLU after each.
    fn default() -> Self {
        ArchDescriptor {
            input_channels: 2,
            convs: vec![
                ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 64, kernel: 3, stride: 2 },
                ConvSpec { out_channels: 64, kernel: 3, stride: 1 },
            ],
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.convs.is_empty() {
            return Err(Error::config("architecture needs input channels and at least one conv layer"));
        }
        if self.convs.iter().any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
            return Err(Error::config("conv layers need positive channels, kernel and stride"));
        }
        let last = self.convs.last().map(|c| c.out_channels).unwrap_or(0);
        if last % 2 != 0 {
            return Err(Error::config(format!("last conv must have an even channel count, got {last}")));
        }
        Ok(())
    }

    /// Length of the pooled feature vector, `last conv channels / 2`.
    pub fn fc_inputs(&self) -> usize {
        self.convs.last().map(|c| c.out_channels / 2).unwrap_or(0)
    }

    /// Smallest input side for which every layer yields at least one output.
    pub fn min_input_side(&self) -> usize {
        self.convs.iter().rev().fold(1, |out, c| (out - 1) * c.stride + c.kernel)
    }

    /// Spatial side after every conv layer.
    pub fn feature_sides(&self, input: usize) -> Option<Vec<usize>> {
        let mut side = input;
        let mut sides = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            if side < c.kernel {
                return None;
            }
            side = (side - c.kernel) / c.stride + 1;
            sides.push(side);
        }
        Some(sides)
    }
}

/// Network output for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    pub logit: f64,
    /// `sigmoid(logit)`
    pub c_s: f64,
}

impl MatchScore {
    pub fn from_logit(logit: f64) -> Self {
        MatchScore { logit, c_s: sigmoid(logit) }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Convolutional stack, pair-wise correlation pooling, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PcnModel<T = f32> {
    arch: ArchDescriptor,
    pub convs: Vec<Conv2d<T>>,
    pub fc_weights: Vec<T>,
    pub fc_bias: T,
}

/// Intermediate values of a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    conv_caches: Vec<ConvCache<T>>,
    pre_activations: Vec<Tensor3<T>>,
    pooled_input: Tensor3<T>,
    pub pooled: Vec<T>,
    pub logit: T,
}

/// Parameter gradients laid out like [`PcnModel::segments`], plus the
/// gradient with respect to the input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PcnGradients<T> {
    pub segments: Vec<Vec<T>>,
    pub input: Option<Tensor3<T>>,
}

impl<T: Scalar> PcnGradients<T> {
    pub fn zeros_like(model: &PcnModel<T>) -> Self {
        PcnGradients { segments: model.segments().iter().map(|s| vec![T::zero(); s.len()]).collect(), input: None }
    }

    /// Elementwise sum of parameter gradients; input gradients are dropped.
    pub fn add(mut self, other: &PcnGradients<T>) -> Self {
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        self.input = None;
        self
    }

    pub fn scale(mut self, factor: T) -> Self {
        for seg in self.segments.iter_mut() {
            seg.iter_mut().for_each(|v| *v = *v * factor);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().flatten().all(|v| v.is_finite())
    }

    /// Deterministic pairwise (tree) sum; the grouping depends only on
    /// `items.len()`.
    pub fn tree_sum(mut items: Vec<PcnGradients<T>>) -> Option<PcnGradients<T>> {
        while items.len() > 1 {
            let mut next = Vec::with_capacity(items.len().div_ceil(2));
            let mut it = items.into_iter();
            while let Some(a) = it.next() {
                match it.next() {
                    Some(b) => next.push(a.add(&b)),
                    None => next.push(a),
                }
            }
            items = next;
        }
        items.pop()
    }
}

impl<T: Scalar> PcnModel<T> {
    /// All-zero parameters.
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let mut in_c = arch.input_channels;
        let convs = arch
            .convs
            .iter()
            .map(|c| {
                let layer = Conv2d::zeros(in_c, c.out_channels, c.kernel, c.stride);
                in_c = c.out_channels;
                layer
            })
            .collect();
        let fc = arch.fc_inputs();
        Ok(PcnModel { arch, convs, fc_weights: vec![T::zero(); fc], fc_bias: T::zero() })
    }

    /// He-uniform weights for every layer, zero biases, from `seed`.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = arch.input_channels;
        let convs = arch
            .convs
            .iter()
            .map(|c| {
                let layer = Conv2d::he_uniform(in_c, c.out_channels, c.kernel, c.stride, &mut rng);
                in_c = c.out_channels;
                layer
            })
            .collect();
        let fc = arch.fc_inputs();
        let limit = (6.0 / fc as f64).sqrt();
        let fc_weights = (0..fc).map(|_| T::from_f64(rand::Rng::random_range(&mut rng, -limit..limit))).collect();
        Ok(PcnModel { arch, convs, fc_weights, fc_bias: T::zero() })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    /// Parameter blocks in declaration order: per conv `weights, bias`,
    /// then `fc weights, fc bias`.
    pub fn segments(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        out.push(&self.fc_weights);
        out.push(std::slice::from_ref(&self.fc_bias));
        out
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in self.convs.iter_mut() {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc_weights);
        out.push(std::slice::from_mut(&mut self.fc_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> PcnModel<U> {
        PcnModel {
            arch: self.arch.clone(),
            convs: self.convs.iter().map(Conv2d::cast).collect(),
            fc_weights: self.fc_weights.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            fc_bias: U::from_f64(self.fc_bias.as_f64()),
        }
    }

    fn check_input(&self, pair: &PairTensor<T>) -> Result<()> {
        let side = pair.side();
        let min = self.arch.min_input_side();
        if side < min {
            return Err(Error::dim(format!("pair side {side} below the architecture minimum {min}")));
        }
        if pair.tensor().channels() != self.arch.input_channels {
            return Err(Error::dim("pair channel count does not match the architecture"));
        }
        Ok(())
    }

    fn head(&self, pooled: &[T]) -> T {
        pooled.iter().zip(&self.fc_weights).map(|(&p, &w)| p * w).sum::<T>() + self.fc_bias
    }

    /// Pooled feature vector (input of the linear head).
    pub fn features(&self, pair: &PairTensor<T>) -> Result<Vec<T>> {
        self.check_input(pair)?;
        let mut x = pair.tensor().clone();
        for conv in &self.convs {
            x = relu_forward(&conv.forward(&x)?);
        }
        pairwise_corr_pool_forward(&x)
    }

    pub fn logit(&self, pair: &PairTensor<T>) -> Result<T> {
        Ok(self.head(&self.features(pair)?))
    }

    pub fn forward(&self, pair: &PairTensor<T>) -> Result<MatchScore> {
        Ok(MatchScore::from_logit(self.logit(pair)?.as_f64()))
    }

    /// Scores for many pairs, evaluated in parallel on the current rayon
    /// pool. Output order follows `pairs`.
    pub fn forward_batch(&self, pairs: &[PairTensor<T>]) -> Result<Vec<MatchScore>> {
        pairs.par_iter().map(|p| self.forward(p)).collect()
    }

    pub fn forward_train(&self, pair: &PairTensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(pair)?;
        let mut x = pair.tensor().clone();
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut pre_activations = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (z, cache) = conv.forward_train(&x)?;
            x = relu_forward(&z);
            conv_caches.push(cache);
            pre_activations.push(z);
        }
        let pooled = pairwise_corr_pool_forward(&x)?;
        let logit = self.head(&pooled);
        Ok(ForwardCache { conv_caches, pre_activations, pooled_input: x, pooled, logit })
    }

    /// Backpropagate `d loss / d logit` through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogit: T) -> Result<PcnGradients<T>> {
        let n_conv = self.convs.len();
        let mut segments: Vec<Vec<T>> = vec![Vec::new(); 2 * n_conv + 2];
        segments[2 * n_conv] = cache.pooled.iter().map(|&p| p * dlogit).collect();
        segments[2 * n_conv + 1] = vec![dlogit];
        let grad_pooled: Vec<T> = self.fc_weights.iter().map(|&w| w * dlogit).collect();
        let mut grad = pairwise_corr_pool_backward(&cache.pooled_input, &grad_pooled)?;
        for i in (0..n_conv).rev() {
            let grad_z = relu_backward(&cache.pre_activations[i], &grad)?;
            let g = self.convs[i].backward(&cache.conv_caches[i], &grad_z)?;
            segments[2 * i] = g.weights;
            segments[2 * i + 1] = g.bias;
            grad = g.input;
        }
        Ok(PcnGradients { segments, input: Some(grad) })
    }
}
