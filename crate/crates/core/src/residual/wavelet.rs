//! Periodized orthogonal 2-D wavelet transform with reflective padding to a
//! dyadic size.

use crate::plane::Plane;

/// Daubechies analysis low-pass filter with 8 taps (4 vanishing moments).
pub const DB4_LOWPASS: [f64; 8] = [
    0.230_377_813_308_896_4,
    0.714_846_570_552_915_4,
    0.630_880_767_929_858_7,
    -0.027_983_769_416_859_9,
    -0.187_034_811_719_093_1,
    0.030_841_381_835_560_7,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_0,
];

/// Quadrature-mirror high-pass: `g[k] = (-1)^k h[L-1-k]`.
pub fn highpass(lowpass: &[f64]) -> Vec<f64> {
    let n = lowpass.len();
    (0..n)
        .map(|k| if k % 2 == 0 { lowpass[n - 1 - k] } else { -lowpass[n - 1 - k] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Wavelet {
    #[default]
    Daubechies8Tap,
}

impl Wavelet {
    pub fn lowpass(self) -> &'static [f64] {
        match self {
            Wavelet::Daubechies8Tap => &DB4_LOWPASS,
        }
    }
}

/// Detail bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    /// Low-pass along rows, high-pass along columns.
    pub horizontal: Plane,
    /// High-pass along rows, low-pass along columns.
    pub vertical: Plane,
    pub diagonal: Plane,
}

impl DetailBands {
    pub fn iter(&self) -> impl Iterator<Item = &Plane> {
        [&self.horizontal, &self.vertical, &self.diagonal].into_iter()
    }

    pub fn map(&self, mut f: impl FnMut(&Plane) -> Plane) -> DetailBands {
        DetailBands { horizontal: f(&self.horizontal), vertical: f(&self.vertical), diagonal: f(&self.diagonal) }
    }
}

/// Multi-level decomposition. `details[0]` is the finest level.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub approximation: Plane,
    pub details: Vec<DetailBands>,
    pub wavelet: Wavelet,
    /// Dimensions of the input before padding.
    pub source_dims: (usize, usize),
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

/// Half-sample symmetric index into `0..n`.
fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let i = i % period;
    if i < n {
        i
    } else {
        period - 1 - i
    }
}

fn padded_len(n: usize, levels: usize) -> usize {
    let block = 1usize << levels;
    n.div_ceil(block) * block
}

fn pad_reflect(x: &Plane, rows: usize, cols: usize) -> Plane {
    if x.dims() == (rows, cols) {
        return x.clone();
    }
    Plane::from_fn(rows, cols, |r, c| x[(reflect(r, x.rows()), reflect(c, x.cols()))])
}

fn analyze_1d(input: &[f64], low: &[f64], high: &[f64], approx: &mut [f64], detail: &mut [f64]) {
    let n = input.len();
    for k in 0..n / 2 {
        let mut a = 0.0;
        let mut d = 0.0;
        for (t, (&h, &g)) in low.iter().zip(high).enumerate() {
            let x = input[(2 * k + t) % n];
            a += h * x;
            d += g * x;
        }
        approx[k] = a;
        detail[k] = d;
    }
}

fn synthesize_1d(approx: &[f64], detail: &[f64], low: &[f64], high: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..n / 2 {
        for (t, (&h, &g)) in low.iter().zip(high).enumerate() {
            out[(2 * k + t) % n] += h * approx[k] + g * detail[k];
        }
    }
}

/// One separable 2-D analysis step on an even-sized plane.
fn analyze_2d(x: &Plane, low: &[f64], high: &[f64]) -> (Plane, DetailBands) {
    let (rows, cols) = x.dims();
    let (hr, hc) = (rows / 2, cols / 2);
    // along each row
    let mut row_low = Plane::zeros(rows, hc);
    let mut row_high = Plane::zeros(rows, hc);
    let mut a = vec![0.0; hc];
    let mut d = vec![0.0; hc];
    for r in 0..rows {
        analyze_1d(x.row(r), low, high, &mut a, &mut d);
        for c in 0..hc {
            row_low[(r, c)] = a[c];
            row_high[(r, c)] = d[c];
        }
    }
    // along each column
    let columns = |src: &Plane| -> (Plane, Plane) {
        let mut lo = Plane::zeros(hr, hc);
        let mut hi = Plane::zeros(hr, hc);
        let mut col = vec![0.0; rows];
        let mut a = vec![0.0; hr];
        let mut d = vec![0.0; hr];
        for c in 0..hc {
            for r in 0..rows {
                col[r] = src[(r, c)];
            }
            analyze_1d(&col, low, high, &mut a, &mut d);
            for r in 0..hr {
                lo[(r, c)] = a[r];
                hi[(r, c)] = d[r];
            }
        }
        (lo, hi)
    };
    let (ll, horizontal) = columns(&row_low);
    let (vertical, diagonal) = columns(&row_high);
    (ll, DetailBands { horizontal, vertical, diagonal })
}

fn synthesize_2d(ll: &Plane, bands: &DetailBands, low: &[f64], high: &[f64]) -> Plane {
    let (hr, hc) = ll.dims();
    let (rows, cols) = (2 * hr, 2 * hc);
    let columns = |lo: &Plane, hi: &Plane| -> Plane {
        let mut out = Plane::zeros(rows, hc);
        let mut a = vec![0.0; hr];
        let mut d = vec![0.0; hr];
        let mut col = vec![0.0; rows];
        for c in 0..hc {
            for r in 0..hr {
                a[r] = lo[(r, c)];
                d[r] = hi[(r, c)];
            }
            synthesize_1d(&a, &d, low, high, &mut col);
            for r in 0..rows {
                out[(r, c)] = col[r];
            }
        }
        out
    };
    let row_low = columns(ll, &bands.horizontal);
    let row_high = columns(&bands.vertical, &bands.diagonal);
    let mut out = Plane::zeros(rows, cols);
    let mut line = vec![0.0; cols];
    for r in 0..rows {
        synthesize_1d(row_low.row(r), row_high.row(r), low, high, &mut line);
        for c in 0..cols {
            out[(r, c)] = line[c];
        }
    }
    out
}

/// Forward transform. Inputs whose sides are not multiples of `2^levels`
/// are reflect-padded; [`idwt2`] crops back.
pub fn dwt2(x: &Plane, wavelet: Wavelet, levels: usize) -> Pyramid {
    assert!(levels >= 1, "at least one decomposition level");
    let low = wavelet.lowpass();
    let high = highpass(low);
    let (rows, cols) = (padded_len(x.rows(), levels), padded_len(x.cols(), levels));
    let mut current = pad_reflect(x, rows, cols);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, bands) = analyze_2d(&current, low, &high);
        details.push(bands);
        current = ll;
    }
    Pyramid { approximation: current, details, wavelet, source_dims: x.dims() }
}

pub fn idwt2(p: &Pyramid) -> Plane {
    let low = p.wavelet.lowpass();
    let high = highpass(low);
    let mut current = p.approximation.clone();
    for bands in p.details.iter().rev() {
        current = synthesize_2d(&current, bands, low, &high);
    }
    let (rows, cols) = p.source_dims;
    if current.dims() == (rows, cols) {
        current
    } else {
        current.window(0, 0, rows, cols).expect("padded plane contains source")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filter_is_orthonormal() {
        let h = &DB4_LOWPASS;
        let norm: f64 = h.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((h.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() < 1e-12);
        for shift in [2, 4, 6] {
            let s: f64 = (0..8 - shift).map(|k| h[k] * h[k + shift]).sum();
            assert!(s.abs() < 1e-12, "shift {shift}: {s}");
        }
        let g = highpass(h);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn constant_has_no_detail() {
        let x = Plane::filled(32, 32, 117.0);
        let p = dwt2(&x, Wavelet::default(), 4);
        for bands in &p.details {
            for b in bands.iter() {
                assert!(b.as_slice().iter().all(|v| v.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn perfect_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Plane::from_fn(64, 64, |_, _| rng.random_range(0.0..255.0));
        let back = idwt2(&dwt2(&x, Wavelet::default(), 4));
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn reconstructs_impulse_and_odd_sizes() {
        let mut x = Plane::zeros(37, 50);
        x[(11, 23)] = 1.0;
        let back = idwt2(&dwt2(&x, Wavelet::default(), 4));
        assert_eq!(back.dims(), (37, 50));
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn energy_is_preserved_on_dyadic_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Plane::from_fn(32, 16, |_, _| rng.random_range(-1.0..1.0));
        let p = dwt2(&x, Wavelet::default(), 3);
        let mut e = p.approximation.energy();
        for bands in &p.details {
            e += bands.iter().map(Plane::energy).sum::<f64>();
        }
        assert!((e - x.energy()).abs() < 1e-9 * x.energy());
    }
}
