//! Straightforward f64 re-implementations used as references in tests.
//! The reference computations never call into the library's numeric code.

#![allow(dead_code)]

use rand::Rng;
use softlab::nnet::{Layer, Network, Tensor};
use softlab::rng::rng_for;

/// `mean_b -sum_k q_bk * ln softmax(z_b)_k`, written out directly.
pub fn soft_ce(logits: &[f64], targets: &[f64], k: usize) -> f64 {
    let b = logits.len() / k;
    let mut total = 0.0;
    for (z, q) in logits.chunks(k).zip(targets.chunks(k)) {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (zi, qi) in z.iter().zip(q) {
            total -= qi * (zi - lse);
        }
    }
    total / b as f64
}

/// Central finite-difference gradient of [`soft_ce`] with respect to the logits.
pub fn soft_ce_numeric_grad(logits: &[f64], targets: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut z = logits.to_vec();
    (0..z.len())
        .map(|i| {
            let orig = z[i];
            z[i] = orig + h;
            let up = soft_ce(&z, targets, k);
            z[i] = orig - h;
            let down = soft_ce(&z, targets, k);
            z[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// NHWC activation in f64.
#[derive(Clone)]
pub struct Act {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Act {
    fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.v[((b * self.h + y) * self.w + x) * self.c + c]
    }
}

/// Logits of `layers` with f64 parameters `params` (same layout as
/// `Network::params`): conv weights are `[(ky*3+kx)*cin + ci][co]`,
/// linear weights `[in][out]`.
pub fn reference_logits(layers: &[Layer], params: &[Vec<f64>], input: &Act) -> Vec<f64> {
    reference_forward(layers, params, input).0
}

/// Logits plus the piecewise-linear branch taken: every ReLU sign and
/// every max-pool winner. Finite differences are only meaningful when the
/// pattern is the same on both sides of the step.
pub fn reference_forward(layers: &[Layer], params: &[Vec<f64>], input: &Act) -> (Vec<f64>, Vec<u8>) {
    let mut pattern = Vec::new();
    let mut a = input.clone();
    let mut flat: Option<(usize, Vec<f64>)> = None;
    let mut slot = 0;
    for layer in layers {
        match *layer {
            Layer::Conv3x3 { in_channels, out_channels } => {
                let (w, bias) = (&params[slot], &params[slot + 1]);
                slot += 2;
                let mut out = vec![0.0; a.b * a.h * a.w * out_channels];
                for b in 0..a.b {
                    for y in 0..a.h {
                        for x in 0..a.w {
                            for co in 0..out_channels {
                                let mut s = bias[co];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                        if sy < 0 || sx < 0 || sy >= a.h as isize || sx >= a.w as isize {
                                            continue;
                                        }
                                        for ci in 0..in_channels {
                                            let wi = ((ky * 3 + kx) * in_channels + ci) * out_channels + co;
                                            s += w[wi] * a.at(b, sy as usize, sx as usize, ci);
                                        }
                                    }
                                }
                                out[((b * a.h + y) * a.w + x) * out_channels + co] = s;
                            }
                        }
                    }
                }
                a = Act { c: out_channels, v: out, ..a };
            }
            Layer::Relu => {
                let v = match &mut flat {
                    Some((_, v)) => v,
                    None => &mut a.v,
                };
                for x in v.iter_mut() {
                    pattern.push((*x > 0.0) as u8);
                    *x = x.max(0.0);
                }
            }
            Layer::MaxPool2 => {
                let (h, w) = (a.h / 2, a.w / 2);
                let mut out = Vec::with_capacity(a.b * h * w * a.c);
                for b in 0..a.b {
                    for y in 0..h {
                        for x in 0..w {
                            for c in 0..a.c {
                                let (mut best, mut arg) = (f64::MIN, 0u8);
                                for (n, &(dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                                    let v = a.at(b, 2 * y + dy, 2 * x + dx, c);
                                    if v > best {
                                        (best, arg) = (v, n as u8);
                                    }
                                }
                                pattern.push(arg);
                                out.push(best);
                            }
                        }
                    }
                }
                a = Act { h, w, v: out, ..a };
            }
            Layer::GlobalAvgPool => {
                let mut out = vec![0.0; a.b * a.c];
                for b in 0..a.b {
                    for y in 0..a.h {
                        for x in 0..a.w {
                            for c in 0..a.c {
                                out[b * a.c + c] += a.at(b, y, x, c) / (a.h * a.w) as f64;
                            }
                        }
                    }
                }
                flat = Some((a.c, out));
            }
            Layer::Linear { inputs, outputs } => {
                let (w, bias) = (&params[slot], &params[slot + 1]);
                slot += 2;
                let (_, v) = flat.take().expect("linear after pooling");
                let mut out = Vec::with_capacity(a.b * outputs);
                for row in v.chunks(inputs) {
                    for o in 0..outputs {
                        out.push(bias[o] + (0..inputs).map(|i| row[i] * w[i * outputs + o]).sum::<f64>());
                    }
                }
                flat = Some((outputs, out));
            }
        }
    }
    (flat.expect("network ends in a linear layer").1, pattern)
}

pub fn params_f64(net: &Network) -> Vec<Vec<f64>> {
    net.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

pub fn act_from(t: &Tensor) -> Act {
    let s = t.shape();
    Act { b: s[0], h: s[1], w: s[2], c: s[3], v: t.data().iter().map(|&v| v as f64).collect() }
}

pub struct NumericGrads {
    pub grads: Vec<Vec<f64>>,
    /// Entries where the `h` step crossed a kink and `h_fallback` was used.
    pub fallbacks: usize,
    /// Entries where even `h_fallback` crossed a kink; left at NaN.
    pub unresolved: usize,
}

/// Central finite differences of the reference loss for every parameter.
pub fn numeric_param_grads(
    layers: &[Layer],
    params: &[Vec<f64>],
    input: &Act,
    targets: &[f64],
    k: usize,
    h: f64,
    h_fallback: f64,
) -> NumericGrads {
    let (_, base) = reference_forward(layers, params, input);
    let mut p = params.to_vec();
    let central = |p: &mut Vec<Vec<f64>>, t: usize, i: usize, h: f64| {
        let orig = p[t][i];
        p[t][i] = orig + h;
        let (up, pu) = reference_forward(layers, p, input);
        p[t][i] = orig - h;
        let (down, pd) = reference_forward(layers, p, input);
        p[t][i] = orig;
        (pu == base && pd == base).then(|| (soft_ce(&up, targets, k) - soft_ce(&down, targets, k)) / (2.0 * h))
    };
    let (mut fallbacks, mut unresolved) = (0, 0);
    let mut grads = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let mut g = Vec::with_capacity(p[t].len());
        for i in 0..p[t].len() {
            let v = central(&mut p, t, i, h).or_else(|| {
                fallbacks += 1;
                central(&mut p, t, i, h_fallback)
            });
            if v.is_none() {
                unresolved += 1;
            }
            g.push(v.unwrap_or(f64::NAN));
        }
        grads.push(g);
    }
    NumericGrads { grads, fallbacks, unresolved }
}

/// Random point on the simplex: normalized exponentials, optionally sparse.
pub fn random_distribution<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let keep = rng.random_range(1..=k);
    let mut v: Vec<f64> = (0..k).map(|i| if i < keep { -rng.random::<f64>().ln() } else { 0.0 }).collect();
    for i in (1..k).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub fallbacks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)` maximised over every parameter of a
/// random two-block network on 8x8 inputs, with step 1e-3 (1e-6 where
/// 1e-3 crosses a kink). Unresolved entries count as failures.
pub fn gradient_check(seed: u64, floor: f64) -> GradCheck {
    let mut rng = rng_for(seed, 0xD1FF, 0);
    let k = rng.random_range(2..=6);
    let widths = [rng.random_range(2..=5), rng.random_range(2..=6)];
    let batch = rng.random_range(1..=4);
    let mut net = Network::small_cnn(k, &widths, seed).unwrap();
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
    let input: Vec<f32> = (0..batch * 8 * 8 * 3).map(|_| rng.random()).collect();
    let input = Tensor::new(vec![batch, 8, 8, 3], input).unwrap();
    let targets: Vec<f32> = (0..batch).flat_map(|_| random_distribution(&mut rng, k)).map(|v| v as f32).collect();
    let target_t = Tensor::new(vec![batch, k], targets.clone()).unwrap();

    let (out, cache) = net.forward_with_cache(&input).unwrap();
    let (_, dlogits) = softlab::nnet::soft_cross_entropy(&out.logits, &target_t).unwrap();
    let analytic = net.backward(&cache, &dlogits).unwrap();

    let targets64: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
    let numeric =
        numeric_param_grads(net.layers(), &params_f64(&net), &act_from(&input), &targets64, k, 1e-3, 1e-6);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, n) in analytic.0.iter().zip(&numeric.grads) {
        for (&a, &n) in a.data().iter().zip(n) {
            let a = a as f64;
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            checked += 1;
        }
    }
    GradCheck { max_rel_error: worst, checked, fallbacks: numeric.fallbacks }
}
