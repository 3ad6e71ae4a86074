//! Exact O(n^2) t-SNE over network embeddings.

use std::io::Write;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelkit::SoftLabel;
use crate::nnet::{predict, Network};
use crate::rng::{rng_for, stream};
use crate::synthgen::{Dataset, Split};

/// Bisection budget per row when matching the target perplexity.
pub const BANDWIDTH_MAX_ITERS: usize = 50;
/// Allowed gap between row entropy and `log2(perplexity)`, in bits.
pub const ENTROPY_TOLERANCE_BITS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_early: f64,
    pub momentum_late: f64,
    pub momentum_switch_iter: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 5_000,
            learning_rate: 200.0,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch_iter: 250,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    /// `KL(P || Q)` against the unexaggerated `P`, before each update.
    pub objective_trace: Vec<f64>,
    /// Largest `|sum(Q) - 1|` seen over all iterations.
    pub max_q_sum_error: f64,
    /// Rows whose bandwidth search hit the iteration cap.
    pub unconverged_rows: usize,
}

impl Embedding2D {
    /// Objective at the last exaggerated iteration.
    pub fn objective_after_exaggeration(&self, config: &TsneConfig) -> Option<f64> {
        let idx = config.exaggeration_iters.min(self.objective_trace.len()).checked_sub(1)?;
        self.objective_trace.get(idx).copied()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }
}

/// Row-stochastic conditional affinities `p(j|i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    /// `n x n`, row-major, zero diagonal.
    pub p: Vec<f64>,
    /// Achieved perplexity `2^H(P_i)` per row.
    pub row_perplexity: Vec<f64>,
    pub converged: Vec<bool>,
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("feature rows have different lengths".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input features".into()));
    }
    Ok(dim)
}

pub fn pairwise_sq_distances(features: &[Vec<f64>]) -> Vec<f64> {
    let n = features.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Gaussian conditionals with per-row precision found by bisection in
/// log-precision so that each row's perplexity matches `perplexity`.
pub fn conditional_affinities(features: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    check_features(features)?;
    let n = features.len();
    if !(perplexity >= 1.0 && perplexity <= (n as f64 - 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {perplexity} needs between 1 and n-1 = {} neighbours",
            n as f64 - 1.0
        )));
    }
    let dist = pairwise_sq_distances(features);
    let target_bits = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut row_perplexity = vec![0.0; n];
    let mut converged = vec![false; n];
    let mut shifted = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let d_min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        for j in 0..n {
            shifted[j] = if j == i { 0.0 } else { row[j] - d_min };
        }
        let mean = shifted.iter().sum::<f64>() / (n - 1) as f64;
        // Start at the inverse mean offset so the search is scale-equivariant.
        let mut log_beta = if mean > 0.0 { -mean.ln() } else { 0.0 };
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut step = 1.0;
        let mut entropy_bits = 0.0;
        for _ in 0..BANDWIDTH_MAX_ITERS {
            let beta = log_beta.exp();
            // shifted distances keep the nearest neighbour's weight at 1, so the sum never underflows
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                weights[j] = if j == i { 0.0 } else { (-beta * shifted[j]).exp() };
                sum += weights[j];
                weighted += weights[j] * shifted[j];
            }
            entropy_bits = (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2;
            let gap = entropy_bits - target_bits;
            if gap.abs() < ENTROPY_TOLERANCE_BITS {
                converged[i] = true;
                break;
            }
            if gap > 0.0 {
                lo = log_beta;
                log_beta = if hi.is_finite() { 0.5 * (lo + hi) } else { log_beta + step };
            } else {
                hi = log_beta;
                log_beta = if lo.is_finite() { 0.5 * (lo + hi) } else { log_beta - step };
            }
            if !(lo.is_finite() && hi.is_finite()) {
                step *= 2.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        for j in 0..n {
            p[i * n + j] = weights[j] / sum;
        }
        row_perplexity[i] = entropy_bits.exp2();
    }
    Ok(Affinities { n, p, row_perplexity, converged })
}

/// `P = (P_c + P_c^T) / (2n)`.
pub fn symmetrize(conditional: &[f64], n: usize) -> Result<Vec<f64>> {
    if conditional.len() != n * n {
        return Err(Error::ShapeMismatch(format!("{} entries for a {n}x{n} matrix", conditional.len())));
    }
    let scale = 1.0 / (2.0 * n as f64);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) * scale;
        }
    }
    Ok(p)
}

/// Joint Student-t affinities `Q` of a 2-D layout, `n x n` row-major.
pub fn joint_q(points: &[[f64; 2]]) -> Vec<f64> {
    let n = points.len();
    let mut q = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                let num = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = num;
                z += num;
            }
        }
    }
    q.iter_mut().for_each(|v| *v /= z);
    q
}

/// Gradient descent on `KL(P || Q)` with momentum and early exaggeration.
pub fn tsne(features: &[Vec<f64>], config: &TsneConfig) -> Result<Embedding2D> {
    if config.iterations < 1 {
        return Err(Error::InvalidArgument("t-SNE needs at least one iteration".into()));
    }
    let aff = conditional_affinities(features, config.perplexity)?;
    let n = aff.n;
    let p = symmetrize(&aff.p, n)?;
    let p_entropy_term: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();

    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut rng = rng_for(config.seed, stream::TSNE, 0);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut num = vec![0.0f64; n * n];
    let mut trace = Vec::with_capacity(config.iterations);
    let mut max_q_sum_error = 0.0f64;

    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if it < config.momentum_switch_iter { config.momentum_early } else { config.momentum_late };

        let mut half_z = 0.0;
        let mut p_log_num = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let t = 1.0 + dx * dx + dy * dy;
                let v = 1.0 / t;
                num[i * n + j] = v;
                half_z += v;
                p_log_num -= p[i * n + j] * t.ln();
            }
        }
        let z = 2.0 * half_z;
        let mut q_sum = 0.0;
        grad.iter_mut().for_each(|g| *g = [0.0, 0.0]);
        for i in 0..n {
            for j in i + 1..n {
                let v = num[i * n + j];
                let q = v / z;
                q_sum += 2.0 * q;
                let f = 4.0 * (exaggeration * p[i * n + j] - q) * v;
                let gx = f * (y[i][0] - y[j][0]);
                let gy = f * (y[i][1] - y[j][1]);
                grad[i][0] += gx;
                grad[i][1] += gy;
                grad[j][0] -= gx;
                grad[j][1] -= gy;
            }
        }
        max_q_sum_error = max_q_sum_error.max((q_sum - 1.0).abs());
        // sum_ij p ln q = 2 sum_{i<j} p ln num - ln Z, since sum(P) = 1
        trace.push(p_entropy_term - (2.0 * p_log_num - z.ln()));

        for ((yi, vi), gi) in y.iter_mut().zip(&mut velocity).zip(&grad) {
            for d in 0..2 {
                vi[d] = momentum * vi[d] - config.learning_rate * gi[d];
                yi[d] += vi[d];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |m, p| [m[0] + p[0], m[1] + p[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
        if y.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::NonFinite(format!("t-SNE layout diverged at iteration {it}")));
        }
    }
    Ok(Embedding2D {
        points: y,
        objective_trace: trace,
        max_q_sum_error,
        unconverged_rows: aff.converged.iter().filter(|c| !**c).count(),
    })
}

/// Seeded subsample of `0..n` of size `min(n, max)`, in ascending order.
pub fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if max >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(&mut rng_for(seed, stream::SUBSAMPLE, 0), n, max).into_vec();
    picked.sort_unstable();
    picked
}

/// GAP features of the given items, row per item in the order given.
pub fn extract_embeddings(net: &Network, dataset: &Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let preds = predict(net, dataset, indices, batch_size)?;
    Ok(preds
        .embeddings
        .into_iter()
        .map(|row| row.into_iter().map(f64::from).collect())
        .collect())
}

/// GAP features of every item in a split.
pub fn extract_split_embeddings(net: &Network, dataset: &Dataset, split: Split) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let indices = dataset.indices(split);
    let features = extract_embeddings(net, dataset, &indices, 128)?;
    Ok((indices, features))
}

/// Writes `item_index,x,y,q0..q{k-1}` rows.
pub fn write_embedding_table<W: Write>(
    mut out: W,
    items: &[usize],
    embedding: &Embedding2D,
    labels: &[SoftLabel],
) -> Result<()> {
    if items.len() != embedding.points.len() || items.len() != labels.len() {
        return Err(Error::ShapeMismatch("items, points and labels differ in length".into()));
    }
    let k = labels.first().map_or(0, SoftLabel::k);
    let q_cols: Vec<String> = (0..k).map(|c| format!("q{c}")).collect();
    writeln!(out, "item_index,x,y,{}", q_cols.join(","))?;
    for ((item, p), l) in items.iter().zip(&embedding.points).zip(labels) {
        let qs: Vec<String> = l.probs().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{item},{:.6},{:.6},{}", p[0], p[1], qs.join(","))?;
    }
    out.flush()?;
    Ok(())
}
