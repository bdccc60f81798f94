//! Synthetic camera simulator.
//!
//! Every device owns a zero-mean Gaussian PRNU pattern `K`. Images follow
//! the multiplicative model `I = I0 * (1 + K) + eta` with `eta ~ N(0, theta^2)`,
//! clipped to `[0, 255]` and rounded to 8 bits. Flats use a constant `I0`;
//! naturals use a Gaussian-blurred white-noise scene rescaled to `[30, 220]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fingerprint::{estimate_prnu, Fingerprint};
use crate::imaging::{load_image, recompress_jpeg, save_pgm, Codec, Compression, Image, ImageMeta};
use crate::plane::Plane;
use crate::residual::{extract_residual, DenoiserConfig, NoiseResidual};
use crate::training::{DeviceData, DeviceSet, Split};

pub const MANIFEST: &str = "manifest.tsv";

/// Ground truth for one simulated sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDevice {
    pub device_id: String,
    pub k_true: Plane,
    pub strength: f64,
    pub seed: u64,
}

impl SynthDevice {
    pub fn dims(&self) -> (usize, usize) {
        self.k_true.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_devices: usize,
    pub flats_per_device: usize,
    pub naturals_per_device: usize,
    /// Image size as `(rows, cols)`.
    pub dims: (usize, usize),
    pub strength: f64,
    /// Standard deviation of the additive noise.
    pub noise_std: f64,
    /// JPEG qualities applied in order to every image.
    pub jpeg_chain: Vec<u8>,
    /// Train, validation and evaluation fractions of the naturals.
    pub split: (f64, f64, f64),
    pub seed: u64,
    pub denoiser: DenoiserConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_devices: 20,
            flats_per_device: 25,
            naturals_per_device: 40,
            dims: (128, 128),
            strength: 0.02,
            noise_std: DEFAULT_NOISE_STD,
            jpeg_chain: Vec::new(),
            split: (0.5, 0.25, 0.25),
            seed: 0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

pub const DEFAULT_NOISE_STD: f64 = 20.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::config("need at least one device"));
        }
        if self.flats_per_device == 0 {
            return Err(Error::config("need at least one flat per device"));
        }
        if !(self.strength >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::config("strength and noise_std must be non-negative"));
        }
        if self.dims.0 < 8 || self.dims.1 < 8 {
            return Err(Error::config(format!("image dims {:?} too small", self.dims)));
        }
        if self.jpeg_chain.len() > 2 || self.jpeg_chain.iter().any(|q| !(1..=100).contains(q)) {
            return Err(Error::config(format!(
                "jpeg_chain must hold at most two qualities in 1..=100, got {:?}",
                self.jpeg_chain
            )));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios {:?} must be non-negative and sum to 1", self.split)));
        }
        self.denoiser.validate()
    }

    /// Per-split natural counts: `(round(a n), round(b n), rest)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.naturals_per_device;
        let train = ((self.split.0 * n as f64).round() as usize).min(n);
        let val = ((self.split.1 * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Seed for device `index`, independent of generation order.
pub fn device_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer over master xor index
    let mut z = master ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn device_name(index: usize) -> String {
    format!("dev{index:03}")
}

/// Zero-mean Gaussian PRNU with elementwise standard deviation `strength`.
pub fn gen_device(seed: u64, dims: (usize, usize), strength: f64) -> Result<SynthDevice> {
    if !(strength > 0.0) {
        return Err(Error::config(format!("PRNU strength must be positive, got {strength}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Plane::from_fn(dims.0, dims.1, |_, _| strength * rng.sample::<f64, _>(StandardNormal));
    let mean = raw.mean();
    Ok(SynthDevice { device_id: format!("seed{seed:016x}"), k_true: raw.map(|v| v - mean), strength, seed })
}

fn sensor(dev: &SynthDevice, scene: &Plane, theta: f64, rng: &mut impl Rng) -> Result<Image> {
    let noise = Normal::new(0.0, theta).map_err(|e| Error::config(format!("noise std {theta}: {e}")))?;
    let mut samples = scene.zip_map(&dev.k_true, |i0, k| i0 * (1.0 + k))?;
    for v in samples.as_mut_slice() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 255.0).round();
    }
    Image::new(samples, ImageMeta::for_device(dev.device_id.clone()))
}

/// Flat-field shot at a constant `level`.
pub fn gen_flat(dev: &SynthDevice, level: f64, theta: f64, rng: &mut impl Rng) -> Result<Image> {
    let (r, c) = dev.dims();
    sensor(dev, &Plane::filled(r, c, level), theta, rng)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(x: &Plane, sigma: f64) -> Plane {
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (rows, cols) = x.dims();
    let horiz = Plane::from_fn(rows, cols, |r, c| {
        taps.iter().enumerate().map(|(t, w)| w * x[(r, reflect(c as isize + t as isize - radius, cols))]).sum()
    });
    Plane::from_fn(rows, cols, |r, c| {
        taps.iter().enumerate().map(|(t, w)| w * horiz[(reflect(r as isize + t as isize - radius, rows), c)]).sum()
    })
}

/// Smooth random scene: white noise blurred at a sigma drawn from `[2, 16]`,
/// then min-max scaled to `[30, 220]`.
pub fn gen_scene(dims: (usize, usize), rng: &mut impl Rng) -> Plane {
    let sigma = rng.random_range(2.0..=16.0);
    let white = Plane::from_fn(dims.0, dims.1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let smooth = gaussian_blur(&white, sigma);
    let lo = smooth.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    smooth.map(|v| 30.0 + 190.0 * (v - lo) / span)
}

pub fn gen_natural(dev: &SynthDevice, theta: f64, rng: &mut impl Rng) -> Result<Image> {
    let scene = gen_scene(dev.dims(), rng);
    sensor(dev, &scene, theta, rng)
}

fn apply_chain(mut img: Image, chain: &[u8]) -> Result<Image> {
    for &q in chain {
        img = recompress_jpeg(&img, q)?;
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Flat,
    Natural,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Flat => "flat",
            Role::Natural => "natural",
        }
    }
}

/// Images of one simulated device, naturals already assigned to splits.
#[derive(Debug, Clone)]
pub struct DeviceImages {
    pub truth: SynthDevice,
    pub flats: Vec<Image>,
    /// `(split, image)` in generation order.
    pub naturals: Vec<(Split, Image)>,
}

/// Generate all images of device `index`.
pub fn gen_device_images(cfg: &SynthConfig, index: usize) -> Result<DeviceImages> {
    let seed = device_seed(cfg.seed, index);
    let mut truth = gen_device(seed, cfg.dims, cfg.strength)?;
    truth.device_id = device_name(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let flats = (0..cfg.flats_per_device)
        .map(|_| {
            let level = rng.random_range(100.0..=160.0);
            apply_chain(gen_flat(&truth, level, cfg.noise_std, &mut rng)?, &cfg.jpeg_chain)
        })
        .collect::<Result<Vec<_>>>()?;
    let naturals = (0..cfg.naturals_per_device)
        .map(|_| apply_chain(gen_natural(&truth, cfg.noise_std, &mut rng)?, &cfg.jpeg_chain))
        .collect::<Result<Vec<_>>>()?;
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut order: Vec<usize> = (0..naturals.len()).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Eval; naturals.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Eval
        };
    }
    Ok(DeviceImages { truth, flats, naturals: splits.into_iter().zip(naturals).collect() })
}

/// In-memory synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub devices: DeviceSet,
    pub truths: Vec<SynthDevice>,
}

fn device_data(
    id: &str,
    flats: &[Image],
    naturals: impl Iterator<Item = (Split, Image)>,
    denoiser: &DenoiserConfig,
) -> Result<DeviceData> {
    let fingerprint = estimate_prnu(id, flats, denoiser)?;
    let mut data = DeviceData {
        device_id: id.to_string(),
        fingerprint,
        train: Vec::new(),
        val: Vec::new(),
        eval: Vec::new(),
    };
    for (split, img) in naturals {
        let w = extract_residual(&img, denoiser)?;
        match split {
            Split::Train => data.train.push(w),
            Split::Val => data.val.push(w),
            Split::Eval => data.eval.push(w),
        }
    }
    Ok(data)
}

/// Generate a dataset and, when `root` is given, write its image tree and
/// manifest there.
pub fn build_dataset(cfg: &SynthConfig, root: Option<&Path>) -> Result<SynthDataset> {
    cfg.validate()?;
    let per_device = (0..cfg.n_devices)
        .into_par_iter()
        .map(|i| {
            let images = gen_device_images(cfg, i)?;
            let rows = match root {
                Some(root) => write_device(root, &images, &cfg.jpeg_chain)?,
                None => Vec::new(),
            };
            let data = device_data(&images.truth.device_id, &images.flats, images.naturals.into_iter(), &cfg.denoiser)?;
            Ok((data, images.truth, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut devices = Vec::with_capacity(per_device.len());
    let mut truths = Vec::with_capacity(per_device.len());
    let mut manifest = String::from("device_id\tpath\trole\tsplit\tcompression\n");
    for (data, truth, rows) in per_device {
        devices.push(data);
        truths.push(truth);
        for row in rows {
            manifest.push_str(&row);
        }
    }
    if let Some(root) = root {
        fs::write(root.join(MANIFEST), manifest)?;
    }
    Ok(SynthDataset { devices: DeviceSet::new(devices)?, truths })
}

fn chain_label(chain: &[u8]) -> String {
    if chain.is_empty() {
        "none".into()
    } else {
        chain.iter().map(|q| format!("jpeg{q}")).collect::<Vec<_>>().join(",")
    }
}

fn write_device(root: &Path, images: &DeviceImages, chain: &[u8]) -> Result<Vec<String>> {
    let id = &images.truth.device_id;
    let label = chain_label(chain);
    let mut rows = Vec::new();
    let all = images.flats.iter().map(|img| (Role::Flat, None, img)).chain(
        images.naturals.iter().map(|(s, img)| (Role::Natural, Some(*s), img)),
    );
    let mut counters = [0usize; 2];
    for (role, split, img) in all {
        let n = &mut counters[role as usize];
        let rel = PathBuf::from(id).join(role.as_str()).join(format!("{:03}.pgm", *n));
        *n += 1;
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        save_pgm(img, &path)?;
        let split = split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        let mut row = String::new();
        let _ = writeln!(row, "{id}\t{}\t{}\t{split}\t{label}", rel.display(), role.as_str());
        rows.push(row);
    }
    Ok(rows)
}

fn parse_chain(label: &str) -> Result<Vec<Compression>> {
    if label == "none" {
        return Ok(Vec::new());
    }
    label
        .split(',')
        .map(|s| {
            s.strip_prefix("jpeg")
                .and_then(|q| q.parse::<u8>().ok())
                .map(|q| Compression { codec: Codec::Jpeg, quality: Some(q) })
                .ok_or_else(|| Error::format(format!("bad compression label {s:?}")))
        })
        .collect()
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub device_id: String,
    pub path: PathBuf,
    pub role: Role,
    pub split: Option<Split>,
    pub compression: Vec<Compression>,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(root.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some("device_id\tpath\trole\tsplit\tcompression") {
        return Err(Error::format("manifest header missing or malformed"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::format(format!("manifest line {}: expected 5 fields", n + 2)));
            }
            let role = match f[2] {
                "flat" => Role::Flat,
                "natural" => Role::Natural,
                other => return Err(Error::format(format!("manifest line {}: unknown role {other:?}", n + 2))),
            };
            let split = match (role, f[3]) {
                (Role::Flat, "-") => None,
                (Role::Natural, s) => Some(s.parse()?),
                (Role::Flat, s) => return Err(Error::format(format!("flat image with split {s:?}"))),
            };
            Ok(ManifestEntry {
                device_id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                role,
                split,
                compression: parse_chain(f[4])?,
            })
        })
        .collect()
}

/// Reload a dataset written by [`build_dataset`], recomputing fingerprints
/// and residuals. Device order follows the manifest.
pub fn load_dataset(root: &Path, denoiser: &DenoiserConfig) -> Result<DeviceSet> {
    let entries = read_manifest(root)?;
    let mut ids: Vec<&str> = Vec::new();
    for e in &entries {
        if !ids.contains(&e.device_id.as_str()) {
            ids.push(&e.device_id);
        }
    }
    let load = |e: &ManifestEntry| -> Result<Image> {
        let mut img = load_image(root.join(&e.path))?;
        img.meta.device_id = Some(e.device_id.clone());
        for stage in &e.compression {
            img.meta.push_compression(*stage);
        }
        Ok(img)
    };
    let devices = ids
        .par_iter()
        .map(|id| {
            let mine: Vec<&ManifestEntry> = entries.iter().filter(|e| e.device_id == *id).collect();
            let flats =
                mine.iter().filter(|e| e.role == Role::Flat).map(|e| load(e)).collect::<Result<Vec<_>>>()?;
            let naturals = mine
                .iter()
                .filter(|e| e.role == Role::Natural)
                .map(|e| Ok((e.split.expect("naturals carry a split"), load(e)?)))
                .collect::<Result<Vec<_>>>()?;
            device_data(id, &flats, naturals.into_iter(), denoiser)
        })
        .collect::<Result<Vec<_>>>()?;
    DeviceSet::new(devices)
}

/// Residuals of the eval split for a device, cropped; convenience for tools.
pub fn eval_residuals(ds: &DeviceSet, side: usize) -> Result<Vec<(usize, NoiseResidual)>> {
    ds.queries(Split::Eval).into_iter().map(|(i, w)| Ok((i, w.central_crop(side)?))).collect()
}

/// Fingerprints of a dataset in device order.
pub fn fingerprints(ds: &DeviceSet) -> Vec<&Fingerprint> {
    ds.devices.iter().map(|d| &d.fingerprint).collect()
}
