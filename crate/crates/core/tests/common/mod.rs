//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops and no shared code paths
//! with the library beyond the public layer primitives.

#![allow(dead_code)]

use prnu_match::pcn::{
    pairwise_corr_pool_forward, relu_forward, ArchDescriptor, Conv2d, PairTensor, PcnModel, Tensor3,
};
use prnu_match::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(rows: usize, cols: usize, rng: &mut impl Rng) -> Plane {
    Plane::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_tensor(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor3<f64> {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// `out[dr][dc] = sum_{r,c} a[r][c] * b[(r+dr)%R][(c+dc)%C]`, four nested loops.
pub fn brute_corr_surface(a: &Plane, b: &Plane) -> Plane {
    let (rows, cols) = a.dims();
    Plane::from_fn(rows, cols, |dr, dc| {
        let mut s = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                s += a[(r, c)] * b[((r + dr) % rows, (c + dc) % cols)];
            }
        }
        s
    })
}

/// Spatial mean of the product of channels `2n` and `2n+1`, as a double sum.
pub fn brute_pool(x: &Tensor3<f64>) -> Vec<f64> {
    let (c, h, w) = x.shape();
    (0..c / 2)
        .map(|n| {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x.get(2 * n, i, j) * x.get(2 * n + 1, i, j);
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

/// Full bilinear pooling: `G[a][b] = 1/S^2 sum_{i,j} x[a][i][j] x[b][i][j]`.
pub fn bilinear_gram(x: &Tensor3<f64>) -> Vec<Vec<f64>> {
    let (c, h, w) = x.shape();
    let mut g = vec![vec![0.0; c]; c];
    for (a, row) in g.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x.get(a, i, j) * x.get(b, i, j);
                }
            }
            *v = s / (h * w) as f64;
        }
    }
    g
}

/// Direct valid convolution with loops over every index.
pub fn naive_conv(conv: &Conv2d<f64>, x: &Tensor3<f64>) -> Tensor3<f64> {
    let (cin, h, w) = x.shape();
    let k = conv.kernel;
    let oh = (h - k) / conv.stride + 1;
    let ow = (w - k) / conv.stride + 1;
    Tensor3::from_fn(conv.out_channels, oh, ow, |o, y, xx| {
        let mut s = conv.bias[o];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = conv.weights[((o * cin + ci) * k + ky) * k + kx];
                    s += wgt * x.get(ci, y * conv.stride + ky, xx * conv.stride + kx);
                }
            }
        }
        s
    })
}

/// Activations of every stage: `inputs[i]` feeds conv `i`; `pre[i]` is its
/// output before ReLU.
pub struct Trace {
    pub inputs: Vec<Tensor3<f64>>,
    pub pre: Vec<Tensor3<f64>>,
    pub logit: f64,
}

fn head(model: &PcnModel<f64>, last: &Tensor3<f64>) -> f64 {
    let pooled = pairwise_corr_pool_forward(last).unwrap();
    model.fc_bias + model.fc_weights.iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>()
}

/// Logit when the network is re-run from conv `from` on `input`.
pub fn logit_from(model: &PcnModel<f64>, from: usize, input: &Tensor3<f64>) -> f64 {
    let mut x = input.clone();
    for conv in &model.convs[from..] {
        x = relu_forward(&conv.forward(&x).unwrap());
    }
    head(model, &x)
}

pub fn trace(model: &PcnModel<f64>, input: &Tensor3<f64>) -> Trace {
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut x = input.clone();
    for conv in &model.convs {
        inputs.push(x.clone());
        let z = conv.forward(&x).unwrap();
        x = relu_forward(&z);
        pre.push(z);
    }
    let logit = head(model, &x);
    Trace { inputs, pre, logit }
}

/// Smallest `|z|` over all ReLU inputs.
pub fn relu_margin(t: &Trace) -> f64 {
    t.pre.iter().flat_map(|z| z.values().iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-6;
/// Draws whose ReLU inputs come closer than this to zero are rejected so
/// that a perturbation of size `h` never crosses a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Draw a model and input whose ReLU pre-activations all clear the kink
/// margin. The fc bias is randomized too so it is not trivially zero.
pub fn gradcheck_draw(seed: u64, side: usize) -> (PcnModel<f64>, Tensor3<f64>) {
    let mut r = rng(seed);
    loop {
        let mut model = PcnModel::<f64>::init(ArchDescriptor::default(), r.random()).unwrap();
        model.fc_bias = r.random_range(-0.5..0.5);
        for b in model.convs.iter_mut().flat_map(|c| c.bias.iter_mut()) {
            *b = r.random_range(-0.1..0.1);
        }
        let input = random_tensor(2, side, side, &mut r);
        if relu_margin(&trace(&model, &input)) >= KINK_MARGIN {
            return (model, input);
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradcheckStats {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradcheckStats {
    fn push(&mut self, e: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(e);
    }
}

/// Logit when conv `i`'s pre-activation is replaced by `z`.
pub fn logit_from_pre(model: &PcnModel<f64>, i: usize, z: &Tensor3<f64>) -> f64 {
    let x = relu_forward(z);
    if i + 1 == model.convs.len() {
        head(model, &x)
    } else {
        logit_from(model, i + 1, &x)
    }
}

/// `z += conv restricted to input channel `c` applied to `delta``, where
/// `delta` is that channel's change, `width` wide. No bias.
fn add_channel_delta(conv: &Conv2d<f64>, z: &mut Tensor3<f64>, c: usize, delta: &[f64], width: usize) {
    let (cout, oh, ow) = z.shape();
    let (k, s, cin) = (conv.kernel, conv.stride, conv.in_channels);
    for o in 0..cout {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += conv.weights[((o * cin + c) * k + ky) * k + kx] * delta[(s * y + ky) * width + s * x + kx];
                    }
                }
                let v = z.get(o, y, x) + acc;
                z.set(o, y, x, v);
            }
        }
    }
}

/// Compare analytic gradients of the logit with central differences for
/// every parameter and every input value.
///
/// A conv weight `w[o][c][ky][kx]` enters only output channel `o`, and
/// linearly, so the perturbed pre-activation is the cached one plus
/// `+-h * x[c][s*y+ky][s*x+kx]` on that channel; everything downstream is
/// recomputed.
pub fn gradcheck(model: &PcnModel<f64>, input: &Tensor3<f64>) -> GradcheckStats {
    let pair = PairTensor::from_tensor(input.clone()).unwrap();
    let cache = model.forward_train(&pair).unwrap();
    let grads = model.backward(&cache, 1.0).unwrap();
    let t = trace(model, input);
    assert!((t.logit - cache.logit).abs() <= 1e-12 * (1.0 + t.logit.abs()));
    let h = GRADCHECK_H;
    let mut stats = GradcheckStats::default();
    let n_conv = model.convs.len();

    for i in 0..n_conv {
        let conv = &model.convs[i];
        let x = &t.inputs[i];
        let z = &t.pre[i];
        let (cin, k, s) = (conv.in_channels, conv.kernel, conv.stride);
        let (_, oh, ow) = z.shape();
        let bumped = |o: usize, delta: &dyn Fn(usize, usize) -> f64, sign: f64| {
            if i + 1 == n_conv {
                let mut zp = z.clone();
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = zp.get(o, y, xx) + sign * h * delta(y, xx);
                        zp.set(o, y, xx, v);
                    }
                }
                return logit_from_pre(model, i, &zp);
            }
            // change of relu(z) on channel o, pushed through the next conv
            let mut da = vec![0.0; oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let before = z.get(o, y, xx);
                    let after = before + sign * h * delta(y, xx);
                    da[y * ow + xx] = after.max(0.0) - before.max(0.0);
                }
            }
            let mut zn = t.pre[i + 1].clone();
            add_channel_delta(&model.convs[i + 1], &mut zn, o, &da, ow);
            logit_from_pre(model, i + 1, &zn)
        };
        for o in 0..conv.out_channels {
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let j = ((o * cin + c) * k + ky) * k + kx;
                        let delta = |y: usize, xx: usize| x.get(c, s * y + ky, s * xx + kx);
                        let numeric = (bumped(o, &delta, 1.0) - bumped(o, &delta, -1.0)) / (2.0 * h);
                        stats.push(rel_err(grads.segments[2 * i][j], numeric, GRADCHECK_FLOOR));
                    }
                }
            }
            let one = |_: usize, _: usize| 1.0;
            let numeric = (bumped(o, &one, 1.0) - bumped(o, &one, -1.0)) / (2.0 * h);
            stats.push(rel_err(grads.segments[2 * i + 1][o], numeric, GRADCHECK_FLOOR));
        }
    }

    let mut m = model.clone();
    let last = relu_forward(&t.pre[n_conv - 1]);
    for j in 0..m.fc_weights.len() {
        let orig = m.fc_weights[j];
        m.fc_weights[j] = orig + h;
        let up = head(&m, &last);
        m.fc_weights[j] = orig - h;
        let down = head(&m, &last);
        m.fc_weights[j] = orig;
        stats.push(rel_err(grads.segments[2 * n_conv][j], (up - down) / (2.0 * h), GRADCHECK_FLOOR));
    }
    {
        let orig = m.fc_bias;
        m.fc_bias = orig + h;
        let up = head(&m, &last);
        m.fc_bias = orig - h;
        let down = head(&m, &last);
        m.fc_bias = orig;
        stats.push(rel_err(grads.segments[2 * n_conv + 1][0], (up - down) / (2.0 * h), GRADCHECK_FLOOR));
    }
    let gin = grads.input.as_ref().expect("input gradient");
    let mut x = input.clone();
    for j in 0..x.values().len() {
        let orig = x.values()[j];
        x.values_mut()[j] = orig + h;
        let up = logit_from(&m, 0, &x);
        x.values_mut()[j] = orig - h;
        let down = logit_from(&m, 0, &x);
        x.values_mut()[j] = orig;
        stats.push(rel_err(gin.values()[j], (up - down) / (2.0 * h), GRADCHECK_FLOOR));
    }
    stats
}
