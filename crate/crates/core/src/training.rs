//! Training the pair-wise correlation network.
//!
//! Every batch holds `2 * N_d` pairs: for each training device one coherent
//! pair (its fingerprint with one of its residuals, label 1) and one
//! non-coherent pair (another device's fingerprint with the same residual,
//! label 0). The loss is sigmoid cross-entropy on the logit, the optimizer
//! is Adam, and training stops once validation accuracy has not improved
//! for `patience` epochs; the best-epoch weights are returned.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::imaging::normalize_by_std;
use crate::pcn::io::read_model_prefix;
use crate::pcn::{write_model, ArchDescriptor, PairTensor, PcnGradients, PcnModel, Scalar};
use crate::plane::Plane;
use crate::residual::NoiseResidual;

/// Which residual pool of a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// One device: its fingerprint and disjoint residual pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceData {
    pub device_id: String,
    pub fingerprint: Fingerprint,
    pub train: Vec<NoiseResidual>,
    pub val: Vec<NoiseResidual>,
    pub eval: Vec<NoiseResidual>,
}

impl DeviceData {
    pub fn pool(&self, split: Split) -> &[NoiseResidual] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }

    pub fn central_crop(&self, side: usize) -> Result<DeviceData> {
        let crop = |pool: &[NoiseResidual]| pool.iter().map(|w| w.central_crop(side)).collect::<Result<Vec<_>>>();
        Ok(DeviceData {
            device_id: self.device_id.clone(),
            fingerprint: self.fingerprint.central_crop(side)?,
            train: crop(&self.train)?,
            val: crop(&self.val)?,
            eval: crop(&self.eval)?,
        })
    }
}

/// Devices available for training and evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceSet {
    pub devices: Vec<DeviceData>,
}

impl DeviceSet {
    pub fn new(devices: Vec<DeviceData>) -> Result<Self> {
        let mut ids: Vec<&str> = devices.iter().map(|d| d.device_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Duplicate(format!("device id {:?} appears twice", w[0])));
        }
        Ok(DeviceSet { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.devices.iter().map(|d| d.device_id.as_str()).collect()
    }

    /// Devices at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<DeviceSet> {
        let devices = indices
            .iter()
            .map(|&i| self.devices.get(i).cloned().ok_or_else(|| Error::config(format!("device index {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        DeviceSet::new(devices)
    }

    pub fn central_crop(&self, side: usize) -> Result<DeviceSet> {
        Ok(DeviceSet { devices: self.devices.iter().map(|d| d.central_crop(side)).collect::<Result<_>>()? })
    }

    pub fn fingerprint_db(&self) -> Result<crate::fingerprint::FingerprintDb> {
        crate::fingerprint::FingerprintDb::from_entries(self.devices.iter().map(|d| d.fingerprint.clone()))
    }

    /// Every residual of `split`, tagged with its device index.
    pub fn queries(&self, split: Split) -> Vec<(usize, &NoiseResidual)> {
        self.devices
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.pool(split).iter().map(move |w| (i, w)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Side of the central crop fed to the network.
    pub crop: usize,
    /// Batches per epoch; `None` means `ceil(mean training pool size)`.
    pub batches_per_epoch: Option<usize>,
    pub arch: ArchDescriptor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            patience: 30,
            max_epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            crop: 64,
            batches_per_epoch: None,
            arch: ArchDescriptor::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::config(format!(
                "need 0 < patience ({}) < max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and epsilon must be positive"));
        }
        if self.crop < self.arch.min_input_side() {
            return Err(Error::config(format!(
                "crop {} below the architecture minimum {}",
                self.crop,
                self.arch.min_input_side()
            )));
        }
        self.arch.validate()
    }
}

/// A pair drawn for training: indices into a [`DeviceSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSpec {
    /// Device whose fingerprint is used.
    pub fingerprint: usize,
    /// Device that took the residual.
    pub residual_device: usize,
    /// Index into that device's pool.
    pub residual_index: usize,
    /// 1 for coherent, 0 for non-coherent.
    pub label: u8,
}

pub type Batch = Vec<PairSpec>;

fn ensure_pairable(ds: &DeviceSet, split: Split) -> Result<()> {
    if ds.len() < 2 {
        return Err(Error::config(format!("need at least 2 devices to form non-coherent pairs, got {}", ds.len())));
    }
    if let Some(d) = ds.devices.iter().find(|d| d.pool(split).is_empty()) {
        return Err(Error::config(format!("device {:?} has no {split} residuals", d.device_id)));
    }
    Ok(())
}

/// Uniform draw from `0..n` excluding `skip`.
fn other_device(rng: &mut impl Rng, n: usize, skip: usize) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= skip {
        j + 1
    } else {
        j
    }
}

/// One batch: a coherent and a non-coherent pair per device.
pub fn build_batch(ds: &DeviceSet, rng: &mut impl Rng) -> Result<Batch> {
    ensure_pairable(ds, Split::Train)?;
    let n = ds.len();
    let mut batch = Vec::with_capacity(2 * n);
    for (d, dev) in ds.devices.iter().enumerate() {
        let idx = rng.random_range(0..dev.train.len());
        batch.push(PairSpec { fingerprint: d, residual_device: d, residual_index: idx, label: 1 });
        batch.push(PairSpec { fingerprint: other_device(rng, n, d), residual_device: d, residual_index: idx, label: 0 });
    }
    Ok(batch)
}

pub fn default_batches_per_epoch(ds: &DeviceSet) -> usize {
    let total: usize = ds.devices.iter().map(|d| d.train.len()).sum();
    total.div_ceil(ds.len().max(1)).max(1)
}

/// Fresh batches for one epoch.
pub fn build_epoch_batches(ds: &DeviceSet, rng: &mut impl Rng, n_batches: Option<usize>) -> Result<Vec<Batch>> {
    let n = n_batches.unwrap_or_else(|| default_batches_per_epoch(ds));
    (0..n).map(|_| build_batch(ds, rng)).collect()
}

/// Balanced validation pairs: every validation residual once with its own
/// fingerprint and once with a uniformly drawn other one.
pub fn validation_pairs(ds: &DeviceSet, rng: &mut impl Rng) -> Result<Vec<PairSpec>> {
    ensure_pairable(ds, Split::Val)?;
    let n = ds.len();
    let mut out = Vec::new();
    for (d, dev) in ds.devices.iter().enumerate() {
        for idx in 0..dev.val.len() {
            out.push(PairSpec { fingerprint: d, residual_device: d, residual_index: idx, label: 1 });
            out.push(PairSpec { fingerprint: other_device(rng, n, d), residual_device: d, residual_index: idx, label: 0 });
        }
    }
    Ok(out)
}

/// Numerically stable sigmoid cross-entropy on a logit.
/// Returns `(loss, d loss / d logit)`.
pub fn bce_with_logits(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, crate::pcn::sigmoid(logit) - label)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { learning_rate: c.learning_rate, beta1: c.beta1, beta2: c.beta2, epsilon: c.epsilon }
    }
}

/// First and second moment estimates per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &PcnModel<T>) -> Self {
        let shapes: Vec<usize> = model.segments().iter().map(|s| s.len()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[Vec<T>], state: &mut AdamState<T>, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let one = T::one();
    let bias1 = one - T::from_f64(cfg.beta1.powi(t));
    let bias2 = one - T::from_f64(cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    for (seg, ((p, g), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        debug_assert_eq!(p.len(), g.len(), "block {seg}");
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "epoch,train_loss,val_accuracy")?;
        for e in &self.epochs {
            writeln!(out, "{},{:.9},{:.6}", e.epoch, e.train_loss, e.val_accuracy)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

/// Normalized crops, computed once per training run.
struct PreparedSet {
    fingerprints: Vec<Plane>,
    pools: Vec<[Vec<Plane>; 2]>,
}

impl PreparedSet {
    fn new(ds: &DeviceSet, crop: usize) -> Result<Self> {
        let prep = |w: &NoiseResidual| normalize_by_std(&w.values.central_square(crop)?);
        let fingerprints =
            ds.devices.iter().map(|d| normalize_by_std(&d.fingerprint.k.central_square(crop)?)).collect::<Result<_>>()?;
        let pools = ds
            .devices
            .par_iter()
            .map(|d| {
                Ok([
                    d.train.iter().map(prep).collect::<Result<Vec<_>>>()?,
                    d.val.iter().map(prep).collect::<Result<Vec<_>>>()?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet { fingerprints, pools })
    }

    fn pair(&self, spec: &PairSpec, split: Split) -> Result<PairTensor<f32>> {
        let pool = &self.pools[spec.residual_device][if split == Split::Train { 0 } else { 1 }];
        PairTensor::from_normalized(&self.fingerprints[spec.fingerprint], &pool[spec.residual_index])
    }
}

/// Mean loss and summed-then-averaged gradients of one batch. Per-pair work
/// runs in parallel; the reduction order is fixed.
pub fn batch_gradients(
    model: &PcnModel<f32>,
    pairs: &[(PairTensor<f32>, u8)],
) -> Result<(f64, PcnGradients<f32>)> {
    let scale = 1.0 / pairs.len() as f64;
    let per_pair = pairs
        .par_iter()
        .map(|(pair, label)| {
            let cache = model.forward_train(pair)?;
            let (loss, dlogit) = bce_with_logits(cache.logit as f64, *label as f64);
            let mut g = model.backward(&cache, (dlogit * scale) as f32)?;
            g.input = None;
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per_pair.iter().map(|(l, _)| l).sum::<f64>() * scale;
    let grads = PcnGradients::tree_sum(per_pair.into_iter().map(|(_, g)| g).collect())
        .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    Ok((loss, grads))
}

fn accuracy(model: &PcnModel<f32>, prepared: &PreparedSet, pairs: &[PairSpec]) -> Result<f64> {
    let correct = pairs
        .par_iter()
        .map(|spec| {
            let score = model.forward(&prepared.pair(spec, Split::Val)?)?;
            Ok(((score.c_s > 0.5) == (spec.label == 1)) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / pairs.len() as f64)
}

/// Train from a seeded He-uniform initialization.
pub fn train(ds: &DeviceSet, cfg: &TrainConfig) -> Result<(PcnModel<f32>, TrainHistory)> {
    cfg.validate()?;
    let model = PcnModel::<f32>::init(cfg.arch.clone(), cfg.seed)?;
    train_from(model, ds, cfg)
}

/// Train starting from `model`.
pub fn train_from(
    mut model: PcnModel<f32>,
    ds: &DeviceSet,
    cfg: &TrainConfig,
) -> Result<(PcnModel<f32>, TrainHistory)> {
    cfg.validate()?;
    if model.arch() != &cfg.arch {
        return Err(Error::config("initial model does not match the configured architecture"));
    }
    ensure_pairable(ds, Split::Train)?;
    let prepared = PreparedSet::new(ds, cfg.crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_pairs = validation_pairs(ds, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11))?;
    let adam = AdamConfig::from(cfg);
    let mut state = AdamState::for_model(&model);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, PcnModel<f32>)> = None;
    let mut stale = 0usize;
    let mut stopped_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let batches = build_epoch_batches(ds, &mut rng, cfg.batches_per_epoch)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let pairs = batch
                .iter()
                .map(|s| Ok((prepared.pair(s, Split::Train)?, s.label)))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradients(&model, &pairs)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at epoch {epoch} (loss {loss})")));
            }
            loss_sum += loss;
            adam_step(&mut model.segments_mut(), &grads.segments, &mut state, &adam);
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val_accuracy = accuracy(&model, &prepared, &val_pairs)?;
        epochs.push(EpochRecord { epoch, train_loss, val_accuracy });
        debug!("epoch {epoch}: loss {train_loss:.5} val acc {val_accuracy:.4}");

        let improved = best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc);
        if improved {
            best = Some((epoch, val_accuracy, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_acc, best_model) = best.expect("at least one epoch ran");
    info!(
        "training stopped after {} epochs ({stopped_reason}); best epoch {best_epoch} with val accuracy {best_acc:.4}",
        epochs.len()
    );
    Ok((best_model, TrainHistory { epochs, best_epoch, stopped_reason }))
}

const ADAM_TAG: &[u8; 4] = b"ADAM";

/// Model file followed by the optimizer state appendix: `b"ADAM"`, `u64`
/// step count, then first and second moments as `f32` blocks.
pub fn save_checkpoint(model: &PcnModel<f32>, state: &AdamState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    buf.extend_from_slice(ADAM_TAG);
    buf.extend_from_slice(&state.t.to_le_bytes());
    for seg in state.m.iter().chain(&state.v) {
        for v in seg {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PcnModel<f32>, AdamState<f32>)> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let model = read_model_prefix(&mut r)?;
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != ADAM_TAG {
        return Err(Error::format("checkpoint lacks the optimizer appendix"));
    }
    let mut t = [0u8; 8];
    r.read_exact(&mut t)?;
    let mut state = AdamState::<f32>::for_model(&model);
    state.t = u64::from_le_bytes(t);
    for seg in state.m.iter_mut().chain(state.v.iter_mut()) {
        for v in seg.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
    }
    if !r.is_empty() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::FingerprintFlags;
    use crate::imaging::ImageMeta;

    fn toy_set(n_devices: usize, pool: usize, side: usize) -> DeviceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let plane = |rng: &mut ChaCha8Rng| Plane::from_fn(side, side, |_, _| rng.random_range(-1.0..1.0));
        let devices = (0..n_devices)
            .map(|d| {
                let id = format!("dev{d}");
                let res = |n: usize, rng: &mut ChaCha8Rng| {
                    (0..n).map(|_| NoiseResidual::new(plane(rng), ImageMeta::for_device(id.clone()))).collect()
                };
                DeviceData {
                    device_id: id.clone(),
                    fingerprint: Fingerprint {
                        device_id: id.clone(),
                        k: plane(&mut rng),
                        n_images: 25,
                        flags: FingerprintFlags { zero_meaned: true },
                    },
                    train: res(pool, &mut rng),
                    val: res(pool / 2, &mut rng),
                    eval: res(pool / 2, &mut rng),
                }
            })
            .collect();
        DeviceSet::new(devices).unwrap()
    }

    #[test]
    fn batch_shape_and_balance() {
        let ds = toy_set(2, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&ds, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.iter().filter(|p| p.label == 1).count(), 2);
        for p in &batch {
            assert_eq!(p.label == 1, p.fingerprint == p.residual_device);
        }
        let one = toy_set(1, 4, 16);
        assert!(matches!(build_batch(&one, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_length_defaults_to_mean_pool() {
        let ds = toy_set(3, 5, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(build_epoch_batches(&ds, &mut rng, None).unwrap().len(), 5);
        assert_eq!(build_epoch_batches(&ds, &mut rng, Some(2)).unwrap().len(), 2);
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_with_logits(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g + 0.5).abs() < 1e-15);
        let (l, g) = bce_with_logits(100.0, 1.0);
        assert!(l < 1e-40 && l >= 0.0 && g.abs() < 1e-40);
        let (l, _) = bce_with_logits(-1000.0, 1.0);
        assert!((l - 1000.0).abs() < 1e-9);
        let (_, g) = bce_with_logits(-3.0, 0.0);
        assert!((g - 0.047_425_873_177_566_78).abs() < 1e-15);
        // central difference of the loss
        let h = 1e-6;
        let fd = (bce_with_logits(-3.0 + h, 0.0).0 - bce_with_logits(-3.0 - h, 0.0).0) / (2.0 * h);
        assert!((fd - g).abs() < 1e-8);
    }

    #[test]
    fn adam_first_step_and_zero_gradients() {
        let cfg = AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        for g in [1e-3, 0.5, -7.0] {
            let mut p = vec![1.0f64];
            let mut state = AdamState::<f64>::new(&[1]);
            adam_step(&mut [p.as_mut_slice()], &[vec![g]], &mut state, &cfg);
            let delta = (p[0] - 1.0).abs();
            assert!((0.99 * 1e-3..=1e-3).contains(&delta), "g={g} delta={delta}");
        }
        let mut p = vec![0.25f64, -3.0];
        let mut state = AdamState::<f64>::new(&[2]);
        for _ in 0..5 {
            adam_step(&mut [p.as_mut_slice()], &[vec![0.0, 0.0]], &mut state, &cfg);
        }
        assert_eq!(p, vec![0.25, -3.0]);
    }

    #[test]
    fn adam_matches_scalar_trace() {
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        // hand-rolled scalar Adam for g1 = 1, g2 = -1 starting at x = 0
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for (t, g) in [(1, 1.0f64), (2, -1.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        let cfg = AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps };
        let mut p = vec![0.0f64];
        let mut state = AdamState::<f64>::new(&[1]);
        adam_step(&mut [p.as_mut_slice()], &[vec![1.0]], &mut state, &cfg);
        assert!((p[0] - trace[0]).abs() < 1e-12);
        adam_step(&mut [p.as_mut_slice()], &[vec![-1.0]], &mut state, &cfg);
        assert!((p[0] - trace[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_model_stops_on_patience() {
        let ds = toy_set(3, 4, 16);
        let cfg = TrainConfig { patience: 4, max_epochs: 50, crop: 16, batches_per_epoch: Some(2), ..Default::default() };
        let zero = PcnModel::<f32>::zeros(cfg.arch.clone()).unwrap();
        let (model, history) = train_from(zero.clone(), &ds, &cfg).unwrap();
        assert_eq!(history.stopped_reason, StopReason::Patience);
        assert_eq!(history.epochs.len(), cfg.patience + 1);
        assert_eq!(history.best_epoch, 1);
        assert_eq!(model, zero);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 500, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop: 8, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pcnw");
        let model = PcnModel::<f32>::init(ArchDescriptor::default(), 5).unwrap();
        let mut state = AdamState::for_model(&model);
        state.t = 17;
        state.m[0][3] = 0.25;
        state.v[6][1] = 1.5;
        save_checkpoint(&model, &state, &path).unwrap();
        let (m2, s2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2, state);
    }
}
