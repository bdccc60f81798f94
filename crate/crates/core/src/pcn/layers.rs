//! Layer primitives with explicit forward and backward passes.

use rand::Rng;

use crate::error::{Error, Result};

use super::scalar::{matmul, Op};
use super::{Scalar, Tensor3};

/// Valid-padding 2-D cross-correlation with a square kernel.
///
/// Weights are stored `[out][in][ky][kx]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: (usize, usize, usize),
}

/// Gradients of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor3<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, stride);
        let limit = (6.0 / layer.fan_in() as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = T::from_f64(rng.random_range(-limit..limit));
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        (input >= self.kernel).then(|| (input - self.kernel) / self.stride + 1)
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        match (self.output_size(x.height()), self.output_size(x.width())) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::dim(format!(
                "input {}x{} smaller than {}x{} kernel",
                x.height(),
                x.width(),
                self.kernel,
                self.kernel
            ))),
        }
    }

    fn im2col(&self, x: &Tensor3<T>, oh: usize, ow: usize) -> Vec<T> {
        let (k, s) = (self.kernel, self.stride);
        let n = oh * ow;
        let mut cols = vec![T::zero(); self.fan_in() * n];
        for c in 0..self.in_channels {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let src = &plane[(oy * s + ky) * x.width() + kx..];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            dst.copy_from_slice(&src[..ow]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = src[ox * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn apply(&self, cols: &[T], oh: usize, ow: usize) -> Tensor3<T> {
        let n = oh * ow;
        let mut out = vec![T::zero(); self.out_channels * n];
        for (f, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[f]);
        }
        matmul(self.out_channels, self.fan_in(), n, &self.weights, Op::N, cols, Op::N, T::one(), &mut out);
        Tensor3::from_vec(self.out_channels, oh, ow, out).expect("conv output shape")
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        let (oh, ow) = self.check_input(x)?;
        Ok(self.apply(&self.im2col(x, oh, ow), oh, ow))
    }

    pub fn forward_train(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, ConvCache<T>)> {
        let (oh, ow) = self.check_input(x)?;
        let cols = self.im2col(x, oh, ow);
        let out = self.apply(&cols, oh, ow);
        Ok((out, ConvCache { cols, input_shape: x.shape() }))
    }

    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor3<T>) -> Result<ConvGrads<T>> {
        let (c_in, h, w) = cache.input_shape;
        let (k, s) = (self.kernel, self.stride);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        if grad_out.shape() != (self.out_channels, oh, ow) {
            return Err(Error::dim(format!(
                "conv gradient has shape {:?}, expected {:?}",
                grad_out.shape(),
                (self.out_channels, oh, ow)
            )));
        }
        let n = oh * ow;
        let g = grad_out.values();
        let bias: Vec<T> = g.chunks_exact(n).map(|ch| ch.iter().copied().sum()).collect();

        let mut weights = vec![T::zero(); self.weights.len()];
        matmul(self.out_channels, n, self.fan_in(), g, Op::N, &cache.cols, Op::T, T::zero(), &mut weights);

        let mut grad_cols = vec![T::zero(); self.fan_in() * n];
        matmul(self.fan_in(), self.out_channels, n, &self.weights, Op::T, g, Op::N, T::zero(), &mut grad_cols);

        let mut input = Tensor3::zeros(c_in, h, w);
        let dx = input.values_mut();
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &grad_cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let base = (c * h + oy * s + ky) * w + kx;
                        for ox in 0..ow {
                            dx[base + ox * s] = dx[base + ox * s] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
        Ok(ConvGrads { input, weights, bias })
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            weights: self.weights.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor3<T>, grad_out: &Tensor3<T>) -> Result<Tensor3<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim("relu gradient shape mismatch"));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.values_mut().iter_mut().zip(input.values()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

fn check_pool_input<T: Scalar>(x: &Tensor3<T>) -> Result<()> {
    if x.channels() % 2 != 0 {
        return Err(Error::dim(format!("pair-wise pooling needs an even channel count, got {}", x.channels())));
    }
    if x.height() != x.width() {
        return Err(Error::dim(format!("pair-wise pooling needs square maps, got {}x{}", x.height(), x.width())));
    }
    Ok(())
}

/// Pair-wise correlation pooling: the spatial mean of the product of
/// channels `2n` and `2n + 1` (0-based), giving `channels / 2` outputs.
pub fn pairwise_corr_pool_forward<T: Scalar>(x: &Tensor3<T>) -> Result<Vec<T>> {
    check_pool_input(x)?;
    let area = T::from_f64((x.height() * x.width()) as f64);
    Ok((0..x.channels() / 2)
        .map(|n| {
            let a = x.channel(2 * n);
            let b = x.channel(2 * n + 1);
            a.iter().zip(b).map(|(&p, &q)| p * q).sum::<T>() / area
        })
        .collect())
}

pub fn pairwise_corr_pool_backward<T: Scalar>(x: &Tensor3<T>, grad_out: &[T]) -> Result<Tensor3<T>> {
    check_pool_input(x)?;
    if grad_out.len() != x.channels() / 2 {
        return Err(Error::dim(format!(
            "pooling gradient has {} entries, expected {}",
            grad_out.len(),
            x.channels() / 2
        )));
    }
    let area = T::from_f64((x.height() * x.width()) as f64);
    let n_px = x.height() * x.width();
    let mut out = Tensor3::zeros(x.channels(), x.height(), x.width());
    let dst = out.values_mut();
    for (n, &g) in grad_out.iter().enumerate() {
        let scale = g / area;
        let (a, b) = (x.channel(2 * n), x.channel(2 * n + 1));
        for i in 0..n_px {
            dst[2 * n * n_px + i] = scale * b[i];
            dst[(2 * n + 1) * n_px + i] = scale * a[i];
        }
    }
    Ok(out)
}
