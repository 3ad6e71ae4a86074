//! Cross-entropy against soft targets. One-hot targets reduce it to the
//! ordinary hard-label cross-entropy.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::labelkit::SoftLabel;

/// Row-wise softmax, computed in `f64` and rounded back.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape as input")
}

/// Stacks labels into a `[B, k]` tensor.
pub fn targets_tensor(labels: &[SoftLabel]) -> Result<Tensor> {
    let k = labels.first().map_or(0, SoftLabel::k);
    if labels.iter().any(|l| l.k() != k) {
        return Err(Error::ShapeMismatch("targets have mixed class counts".into()));
    }
    let data = labels.iter().flat_map(|l| l.probs().iter().map(|&p| p as f32)).collect();
    Tensor::new(vec![labels.len(), k], data)
}

/// Mean over the batch of `-sum_k q_k log softmax(z)_k`, and its gradient
/// `(softmax(z) - q) / B` with respect to the logits.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f32, Tensor)> {
    if logits.shape().len() != 2 || logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(b * k);
    for (z, q) in logits.data().chunks_exact(k).zip(targets.data().chunks_exact(k)) {
        let total: f64 = q.iter().map(|&v| v as f64).sum();
        if q.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidSoftLabel(format!("target row {q:?} is not a distribution")));
        }
        let max = z.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = z.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_sum = max + sum.ln();
        for (&zi, &qi) in z.iter().zip(q) {
            let log_p = zi as f64 - log_sum;
            if qi > 0.0 {
                loss -= qi as f64 * log_p;
            }
            grad.push(((log_p.exp() - qi as f64) * inv_b) as f32);
        }
    }
    Ok(((loss * inv_b) as f32, Tensor::new(vec![b, k], grad)?))
}

/// [`soft_cross_entropy`] with [`SoftLabel`] targets.
pub fn soft_cross_entropy_labels(logits: &Tensor, targets: &[SoftLabel]) -> Result<(f32, Tensor)> {
    soft_cross_entropy(logits, &targets_tensor(targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn uniform_logits_one_hot_target() {
        let logits = t(vec![1, 6], vec![0.3; 6]);
        let q = SoftLabel::one_hot(2, 6).unwrap();
        let (loss, _) = soft_cross_entropy_labels(&logits, &[q]).unwrap();
        assert!((loss as f64 - 6f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn gradient_vanishes_at_matching_target() {
        let logits = t(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let p = softmax_rows(&logits);
        let (_, grad) = soft_cross_entropy(&logits, &p).unwrap();
        assert!(grad.data().iter().all(|g| g.abs() < 1e-7));
    }

    #[test]
    fn two_class_hand_case() {
        let logits = t(vec![1, 2], vec![0.0, 0.0]);
        let q = t(vec![1, 2], vec![0.75, 0.25]);
        let (_, grad) = soft_cross_entropy(&logits, &q).unwrap();
        assert_eq!(grad.data(), &[-0.25, 0.25]);
        let batch = t(vec![2, 2], vec![0.0; 4]);
        let q2 = t(vec![2, 2], vec![0.75, 0.25, 0.75, 0.25]);
        let (_, grad) = soft_cross_entropy(&batch, &q2).unwrap();
        assert_eq!(grad.data(), &[-0.125, 0.125, -0.125, 0.125]);
    }

    #[test]
    fn shift_invariance() {
        let logits = t(vec![2, 4], vec![0.1, 2.0, -1.0, 0.5, 3.0, 3.0, -2.0, 0.0]);
        let shifted = t(vec![2, 4], logits.data().iter().map(|v| v + 7.5).collect());
        let q = t(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.5, 0.0]);
        let (a, _) = soft_cross_entropy(&logits, &q).unwrap();
        let (b, _) = soft_cross_entropy(&shifted, &q).unwrap();
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn one_hot_equals_hard_cross_entropy() {
        let logits = t(vec![1, 3], vec![1.0, 2.0, 0.5]);
        let (loss, grad) = soft_cross_entropy(&logits, &t(vec![1, 3], vec![0.0, 1.0, 0.0])).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((loss as f64 - (lse - 2.0)).abs() < 1e-6);
        let p = softmax_rows(&logits);
        assert!((grad.data()[1] - (p.data()[1] - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = t(vec![1, 2], vec![0.5, 0.5]);
        assert!(matches!(
            soft_cross_entropy(&t(vec![1, 2], vec![f32::NAN, 0.0]), &q),
            Err(Error::NonFinite(_))
        ));
        assert!(soft_cross_entropy(&t(vec![1, 2], vec![0.0, 0.0]), &t(vec![1, 2], vec![0.9, 0.9])).is_err());
        assert!(soft_cross_entropy(&t(vec![1, 3], vec![0.0; 3]), &q).is_err());
    }
}
