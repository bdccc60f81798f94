//! Noise residual extraction: wavelet-domain locally adaptive Wiener
//! denoising, `W = I - denoise(I)`, followed by row/column mean removal.

mod wavelet;

pub use wavelet::{dwt2, highpass, idwt2, DetailBands, Pyramid, Wavelet, DB4_LOWPASS};

use crate::error::{Error, Result};
use crate::imaging::{Image, ImageMeta};
use crate::plane::Plane;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub wavelet: Wavelet,
    pub levels: usize,
    /// Variance of the stationary noise the denoiser assumes, in squared
    /// gray levels of the 0-255 range.
    pub sigma0_sq: f64,
    pub window_sizes: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { wavelet: Wavelet::Daubechies8Tap, levels: 4, sigma0_sq: 9.0, window_sizes: vec![3, 5, 7, 9] }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("denoiser needs at least one level"));
        }
        if !(self.sigma0_sq > 0.0) || !self.sigma0_sq.is_finite() {
            return Err(Error::config(format!("sigma0_sq must be positive, got {}", self.sigma0_sq)));
        }
        if self.window_sizes.is_empty() || self.window_sizes.iter().any(|w| w % 2 == 0) {
            return Err(Error::config("window sizes must be a non-empty list of odd integers"));
        }
        Ok(())
    }
}

/// Noise residual of one image, same dimensions as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseResidual {
    pub values: Plane,
    pub source_meta: ImageMeta,
}

impl NoiseResidual {
    pub fn new(values: Plane, source_meta: ImageMeta) -> Self {
        NoiseResidual { values, source_meta }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn central_crop(&self, side: usize) -> Result<NoiseResidual> {
        Ok(NoiseResidual { values: self.values.central_square(side)?, source_meta: self.source_meta.clone() })
    }
}

/// Per-axis box sums of `x` over a `size`-wide window, truncated at the
/// border. Returns `(sums, counts)` along that axis.
fn box_sums_1d(x: &[f64], size: usize, out: &mut [f64], counts: &mut [f64]) {
    let n = x.len();
    let half = size / 2;
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        out[i] = x[lo..=hi].iter().sum();
        counts[i] = (hi - lo + 1) as f64;
    }
}

/// Mean of `x` over a `size x size` window centered on each sample; the
/// window is truncated at the borders and averages only in-bounds samples.
pub fn local_mean(x: &Plane, size: usize) -> Plane {
    let (rows, cols) = x.dims();
    let mut horiz = Plane::zeros(rows, cols);
    let mut hcount = vec![0.0; cols];
    {
        let mut buf = vec![0.0; cols];
        for r in 0..rows {
            box_sums_1d(x.row(r), size, &mut buf, &mut hcount);
            horiz.as_mut_slice()[r * cols..(r + 1) * cols].copy_from_slice(&buf);
        }
    }
    let mut out = Plane::zeros(rows, cols);
    let mut col = vec![0.0; rows];
    let mut buf = vec![0.0; rows];
    let mut vcount = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = horiz[(r, c)];
        }
        box_sums_1d(&col, size, &mut buf, &mut vcount);
        for r in 0..rows {
            out[(r, c)] = buf[r] / (vcount[r] * hcount[c]);
        }
    }
    out
}

/// Locally adaptive Wiener shrinkage of one wavelet subband.
///
/// The local signal variance is the smallest, over all window sizes, of
/// `max(0, mean(c^2) - sigma0^2)`; each coefficient is scaled by
/// `s^2 / (s^2 + sigma0^2)`, so the output never exceeds the input in
/// magnitude.
pub fn wiener_shrink(subband: &Plane, sigma0_sq: f64, window_sizes: &[usize]) -> Plane {
    let squared = subband.map(|c| c * c);
    let mut variance = Plane::filled(subband.rows(), subband.cols(), f64::INFINITY);
    for &w in window_sizes {
        let mean = local_mean(&squared, w);
        for (v, m) in variance.as_mut_slice().iter_mut().zip(mean.as_slice()) {
            *v = v.min((m - sigma0_sq).max(0.0));
        }
    }
    subband
        .zip_map(&variance, |c, s2| c * s2 / (s2 + sigma0_sq))
        .expect("same dims")
}

/// Wavelet-domain denoised estimate of `x`; the approximation band passes
/// through untouched.
pub fn denoise(x: &Plane, cfg: &DenoiserConfig) -> Plane {
    let mut pyramid = dwt2(x, cfg.wavelet, cfg.levels);
    for bands in pyramid.details.iter_mut() {
        *bands = bands.map(|b| wiener_shrink(b, cfg.sigma0_sq, &cfg.window_sizes));
    }
    idwt2(&pyramid)
}

/// Subtract every row mean, then every column mean.
pub fn zero_mean_plane(x: &Plane) -> Plane {
    let (rows, cols) = x.dims();
    let mut out = x.clone();
    for r in 0..rows {
        let mean = out.row(r).iter().sum::<f64>() / cols as f64;
        out.as_mut_slice()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v -= mean);
    }
    for c in 0..cols {
        let mean = (0..rows).map(|r| out[(r, c)]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[(r, c)] -= mean;
        }
    }
    out
}

pub fn zero_mean(res: &NoiseResidual) -> NoiseResidual {
    NoiseResidual { values: zero_mean_plane(&res.values), source_meta: res.source_meta.clone() }
}

/// `W = I - denoise(I)`, zero-meaned.
pub fn extract_residual(img: &Image, cfg: &DenoiserConfig) -> Result<NoiseResidual> {
    cfg.validate()?;
    let samples = img.samples();
    let denoised = denoise(samples, cfg);
    let raw = samples.zip_map(&denoised, |i, d| i - d)?;
    if !raw.is_finite() {
        return Err(Error::Numeric("residual contains non-finite values".into()));
    }
    Ok(NoiseResidual { values: zero_mean_plane(&raw), source_meta: img.meta.clone() })
}
