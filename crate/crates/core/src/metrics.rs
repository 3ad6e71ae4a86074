//! Evaluation against ground-truth label distributions: macro accuracy,
//! mean KL divergence and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelkit::SoftLabel;

/// Floor applied to predicted probabilities inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-12;

pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAccuracy {
    pub value: f64,
    /// Recall per class; `None` for classes without items.
    pub per_class_recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_acc: f64,
    pub mean_kl: f64,
    pub ece: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub n_items: usize,
}

fn check_pair(predictions: &[SoftLabel], truths: &[SoftLabel]) -> Result<usize> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no items to evaluate".into()));
    }
    let k = truths[0].k();
    if predictions.iter().chain(truths).any(|l| l.k() != k) {
        return Err(Error::ShapeMismatch("labels have mixed class counts".into()));
    }
    Ok(k)
}

/// Unweighted mean of per-class recall. An item's class is the argmax of its
/// ground truth; classes with no items are left out of the mean.
pub fn macro_accuracy(predictions: &[SoftLabel], truths: &[SoftLabel]) -> Result<MacroAccuracy> {
    let k = check_pair(predictions, truths)?;
    let mut totals = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for (p, q) in predictions.iter().zip(truths) {
        let class = q.argmax();
        totals[class] += 1;
        if p.argmax() == class {
            correct[class] += 1;
        }
    }
    let per_class_recall: Vec<Option<f64>> = totals
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let value = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MacroAccuracy { value, per_class_recall })
}

/// `KL(q || p)` in nats with `p` floored at [`KL_CLAMP`] and `0 ln 0 = 0`.
pub fn kl_divergence(truth: &SoftLabel, prediction: &SoftLabel) -> f64 {
    truth
        .probs()
        .iter()
        .zip(prediction.probs())
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &p)| q * (q / p.max(KL_CLAMP)).ln())
        .sum()
}

/// Mean of `KL(truth_i || prediction_i)` over items.
pub fn mean_kl(truths: &[SoftLabel], predictions: &[SoftLabel]) -> Result<f64> {
    check_pair(predictions, truths)?;
    let total: f64 = truths.iter().zip(predictions).map(|(q, p)| kl_divergence(q, p)).sum();
    Ok(total / truths.len() as f64)
}

/// Equal-width bins of top-class confidence over `(1/k, 1]`; an item is
/// correct when its predicted argmax matches the ground-truth argmax.
pub fn expected_calibration_error(predictions: &[SoftLabel], truths: &[SoftLabel], n_bins: usize) -> Result<f64> {
    if n_bins < 1 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let k = check_pair(predictions, truths)?;
    let floor = 1.0 / k as f64;
    let width = (1.0 - floor) / n_bins as f64;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (p, q) in predictions.iter().zip(truths) {
        let confidence = p.max_prob();
        let bin = (((confidence - floor) / width).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
        count[bin] += 1;
        conf_sum[bin] += confidence;
        if p.argmax() == q.argmax() {
            hits[bin] += 1;
        }
    }
    let n = predictions.len() as f64;
    let ece = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum::<f64>();
    Ok(ece.clamp(0.0, 1.0))
}

pub fn evaluate(predictions: &[SoftLabel], truths: &[SoftLabel]) -> Result<EvalReport> {
    let acc = macro_accuracy(predictions, truths)?;
    Ok(EvalReport {
        macro_acc: acc.value,
        mean_kl: mean_kl(truths, predictions)?,
        ece: expected_calibration_error(predictions, truths, DEFAULT_ECE_BINS)?,
        per_class_recall: acc.per_class_recall,
        n_items: truths.len(),
    })
}

pub const EVAL_HEADER: &str = "run_id,seed,label_mode,macro_acc,mean_kl,ece,n_items";

/// One `run_id,seed,label_mode,macro_acc,mean_kl,ece,n_items` row.
pub fn eval_row(run_id: &str, seed: u64, label_mode: &str, report: &EvalReport) -> String {
    format!(
        "{run_id},{seed},{label_mode},{:.6},{:.6},{:.6},{}",
        report.macro_acc, report.mean_kl, report.ece, report.n_items
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(p: &[f64]) -> SoftLabel {
        SoftLabel::new(p.to_vec()).unwrap()
    }

    fn hot(c: usize, k: usize) -> SoftLabel {
        SoftLabel::one_hot(c, k).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let truths: Vec<_> = (0..12).map(|i| hot(i % 3, 3)).collect();
        let r = evaluate(&truths, &truths).unwrap();
        assert_eq!(r.macro_acc, 1.0);
        assert_eq!(r.mean_kl, 0.0);
        assert_eq!(r.ece, 0.0);
    }

    #[test]
    fn macro_accuracy_ignores_class_sizes() {
        for big in [2, 200] {
            let mut truths = vec![hot(0, 2), hot(0, 2)];
            let mut preds = truths.clone();
            truths.extend((0..big).map(|_| hot(1, 2)));
            preds.extend((0..big).map(|_| hot(0, 2)));
            let m = macro_accuracy(&preds, &truths).unwrap();
            assert_eq!(m.value, 0.5);
            assert_eq!(m.per_class_recall, vec![Some(1.0), Some(0.0)]);
        }
    }

    #[test]
    fn empty_class_is_dropped() {
        let truths = vec![hot(0, 3), hot(2, 3)];
        let preds = vec![hot(0, 3), hot(1, 3)];
        let m = macro_accuracy(&preds, &truths).unwrap();
        assert_eq!(m.per_class_recall, vec![Some(1.0), None, Some(0.0)]);
        assert_eq!(m.value, 0.5);
    }

    #[test]
    fn balanced_macro_equals_micro() {
        let truths: Vec<_> = (0..30).map(|i| hot(i % 3, 3)).collect();
        let preds: Vec<_> = (0..30).map(|i| hot((i * 7 / 5) % 3, 3)).collect();
        let micro = truths.iter().zip(&preds).filter(|(q, p)| q.argmax() == p.argmax()).count() as f64 / 30.0;
        assert!((macro_accuracy(&preds, &truths).unwrap().value - micro).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_cases() {
        assert!((mean_kl(&[l(&[1.0, 0.0])], &[l(&[0.5, 0.5])]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = mean_kl(&[l(&[0.5, 0.5])], &[l(&[0.25, 0.75])]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_clamps_zero_predictions() {
        let got = kl_divergence(&l(&[0.5, 0.5]), &l(&[1.0, 0.0]));
        assert!((got - (0.5 * 0.5f64.ln() + 0.5 * (0.5 / KL_CLAMP).ln())).abs() < 1e-9);
    }

    #[test]
    fn ece_single_wrong_item() {
        let e = expected_calibration_error(&[l(&[0.8, 0.2])], &[hot(1, 2)], 10).unwrap();
        assert!((e - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ece_confidence_at_floor() {
        // confidence exactly 1/k lands in the first bin
        let e = expected_calibration_error(&[l(&[0.5, 0.5])], &[hot(0, 2)], 10).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        assert!(macro_accuracy(&[], &[]).is_err());
        assert!(mean_kl(&[hot(0, 2)], &[]).is_err());
        assert!(expected_calibration_error(&[hot(0, 2)], &[hot(0, 2)], 0).is_err());
        assert!(mean_kl(&[hot(0, 2)], &[hot(0, 3)]).is_err());
    }

    #[test]
    fn eval_row_format() {
        let r = EvalReport { macro_acc: 0.5, mean_kl: 0.25, ece: 0.125, per_class_recall: vec![], n_items: 4 };
        assert_eq!(eval_row("a", 3, "gt-soft", &r), "a,3,gt-soft,0.500000,0.250000,0.125000,4");
    }
}
