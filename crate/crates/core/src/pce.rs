//! Classical matcher: normalized cross-correlation and peak-to-correlation
//! energy between a residual and a fingerprint.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::imaging::Image;
use crate::plane::Plane;
use crate::residual::NoiseResidual;

pub const DEFAULT_EXCLUSION_RADIUS: usize = 5;

/// Zero-shift normalized cross-correlation.
pub fn ncc(a: &Plane, b: &Plane) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (x - ma, y - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::DegenerateInput("ncc of a constant array".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Circular cross-correlation over every shift:
/// `values[(dr, dc)] = sum a[r][c] * b[(r + dr) % R][(c + dc) % C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrSurface {
    pub values: Plane,
}

impl CorrSurface {
    pub fn at_origin(&self) -> f64 {
        self.values[(0, 0)]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (_, cols) = self.values.dims();
        let (idx, _) = self
            .values
            .as_slice()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (idx / cols, idx % cols)
    }
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(rows: usize, cols: usize) -> Plans {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        Plans {
            row_fwd: p.plan_fft_forward(cols),
            row_inv: p.plan_fft_inverse(cols),
            col_fwd: p.plan_fft_forward(rows),
            col_inv: p.plan_fft_inverse(rows),
        }
    })
}

fn fft2(data: &mut [Complex64], rows: usize, cols: usize, row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
    row.process(data);
    let mut column = vec![Complex64::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// Frequency-domain correlation surface, `IFFT(conj(A) * B)`.
pub fn corr_surface(a: &Plane, b: &Plane) -> Result<CorrSurface> {
    a.ensure_same_dims(b)?;
    let (rows, cols) = a.dims();
    let p = plans(rows, cols);
    let to_complex = |x: &Plane| x.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>();
    let mut fa = to_complex(a);
    let mut fb = to_complex(b);
    fft2(&mut fa, rows, cols, p.row_fwd.as_ref(), p.col_fwd.as_ref());
    fft2(&mut fb, rows, cols, p.row_fwd.as_ref(), p.col_fwd.as_ref());
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = x.conj() * y;
    }
    fft2(&mut fa, rows, cols, p.row_inv.as_ref(), p.col_inv.as_ref());
    let scale = 1.0 / (rows * cols) as f64;
    let values = Plane::from_vec(rows, cols, fa.iter().map(|z| z.re * scale).collect())?;
    Ok(CorrSurface { values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PceScore {
    /// `sign(rho(0,0)) * rho(0,0)^2 / mean off-peak energy`.
    pub pce: f64,
    /// Always `(0, 0)`: residual and fingerprint are assumed aligned.
    pub peak_shift: (usize, usize),
    pub exclusion_radius: usize,
}

fn circular_distance(i: usize, n: usize) -> usize {
    i.min(n - i)
}

/// Signed PCE read at zero shift, with a `(2r+1) x (2r+1)` exclusion
/// neighbourhood around the peak.
pub fn pce_planes(w: &Plane, k: &Plane, exclusion_radius: usize) -> Result<PceScore> {
    w.ensure_same_dims(k)?;
    let (rows, cols) = w.dims();
    let side = 2 * exclusion_radius + 1;
    if side >= rows || side >= cols {
        return Err(Error::config(format!(
            "exclusion radius {exclusion_radius} leaves no off-peak region in a {rows}x{cols} surface"
        )));
    }
    let surface = corr_surface(w, k)?;
    let peak = surface.at_origin();
    let mut energy = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        let near_r = circular_distance(r, rows) <= exclusion_radius;
        for c in 0..cols {
            if near_r && circular_distance(c, cols) <= exclusion_radius {
                continue;
            }
            let v = surface.values[(r, c)];
            energy += v * v;
            count += 1;
        }
    }
    let energy = energy / count as f64;
    if !(energy > 0.0) {
        return Err(Error::DegenerateInput("correlation surface has no off-peak energy".into()));
    }
    Ok(PceScore { pce: peak.signum() * peak * peak / energy, peak_shift: (0, 0), exclusion_radius })
}

/// PCE of a residual against a fingerprint of the same size.
pub fn pce(w: &NoiseResidual, fp: &Fingerprint, exclusion_radius: usize) -> Result<PceScore> {
    pce_planes(&w.values, &fp.k, exclusion_radius)
}

/// Variant that correlates against the intensity-modulated pattern `I * K`.
pub fn pce_intensity_weighted(
    w: &NoiseResidual,
    fp: &Fingerprint,
    image: &Image,
    exclusion_radius: usize,
) -> Result<PceScore> {
    let weighted = image.samples().zip_map(&fp.k, |i, k| i * k)?;
    pce_planes(&w.values, &weighted, exclusion_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(rows: usize, cols: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn ncc_examples() {
        let a = noise(8, 8, 1);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        let checker = Plane::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
        let stripes = Plane::from_fn(4, 4, |r, _| if r % 2 == 0 { 1.0 } else { -1.0 });
        assert!(ncc(&checker, &stripes).unwrap().abs() < 1e-9);
        assert!(matches!(ncc(&Plane::filled(4, 4, 2.0), &a.window(0, 0, 4, 4).unwrap()), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn surface_peaks_at_applied_shift() {
        let a = noise(16, 16, 2);
        assert_eq!(corr_surface(&a, &a).unwrap().argmax(), (0, 0));
        let b = a.circshift(2, 3);
        assert_eq!(corr_surface(&a, &b).unwrap().argmax(), (2, 3));
        assert!(matches!(corr_surface(&a, &noise(8, 16, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_pair_has_large_pce_and_sign_flips() {
        let k = noise(64, 64, 7);
        let pos = pce_planes(&k, &k, 5).unwrap().pce;
        let neg = pce_planes(&k.scale(-1.0), &k, 5).unwrap().pce;
        assert!(pos > 1000.0, "{pos}");
        assert!((pos + neg).abs() < 1e-9 * pos);
    }

    #[test]
    fn exclusion_must_leave_room() {
        let k = noise(8, 8, 1);
        assert!(matches!(pce_planes(&k, &k, 5), Err(Error::Config(_))));
        assert!(pce_planes(&k, &k, 2).is_ok());
    }
}
