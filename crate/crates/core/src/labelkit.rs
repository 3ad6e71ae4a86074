//! Label representations and annotation aggregation.
//!
//! An item's annotations are one-hot votes. The hard label is their
//! (relative) majority, the soft label their mean. Both aggregations share
//! the same tie-break, lowest class index, so `majority_vote(s)` is always
//! `argmax(average(s))`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Slack allowed on `sum(probs) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Default number of simulated annotators per item.
pub const DEFAULT_ANNOTATORS: usize = 15;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A probability distribution over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidSoftLabel(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidSoftLabel(format!("entry {bad} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidSoftLabel(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Builds a label from 32-bit entries, as stored on disk or produced by a network.
    pub fn from_f32(probs: &[f32]) -> Result<Self> {
        Self::new(probs.iter().map(|&p| p as f64).collect())
    }

    pub fn one_hot(class_index: usize, k: usize) -> Result<Self> {
        if class_index >= k {
            return Err(Error::InvalidArgument(format!("class {class_index} out of range for k={k}")));
        }
        let mut probs = vec![0.0; k];
        probs[class_index] = 1.0;
        Self::new(probs)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    pub fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn is_one_hot(&self) -> bool {
        self.support() == 1
    }

    pub fn to_hard(&self) -> HardLabel {
        HardLabel { class_index: self.argmax() }
    }
}

/// One annotator's vote for a single item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardLabel {
    pub class_index: usize,
}

impl HardLabel {
    pub fn to_soft(self, k: usize) -> Result<SoftLabel> {
        SoftLabel::one_hot(self.class_index, k)
    }
}

/// All annotations collected for one item over `k` classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    annotations: Vec<Annotation>,
    k: usize,
}

impl AnnotationSet {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
        }
        Ok(Self { annotations: Vec::new(), k })
    }

    pub fn from_indices(indices: &[usize], k: usize) -> Result<Self> {
        let mut set = Self::new(k)?;
        for &c in indices {
            set.push(Annotation { class_index: c })?;
        }
        Ok(set)
    }

    pub fn push(&mut self, annotation: Annotation) -> Result<()> {
        if annotation.class_index >= self.k {
            return Err(Error::InvalidArgument(format!(
                "annotation class {} out of range for k={}",
                annotation.class_index, self.k
            )));
        }
        self.annotations.push(annotation);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for a in &self.annotations {
            counts[a.class_index] += 1;
        }
        counts
    }
}

/// Relative majority vote, ties to the lowest class index.
pub fn majority_vote(set: &AnnotationSet) -> Result<HardLabel> {
    if set.is_empty() {
        return Err(Error::NoAnnotations);
    }
    Ok(HardLabel { class_index: argmax(&set.counts()) })
}

/// Mean of the one-hot annotations: entry `j` is `count(j) / N`.
pub fn average(set: &AnnotationSet) -> Result<SoftLabel> {
    if set.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let n = set.len() as f64;
    SoftLabel::new(set.counts().into_iter().map(|c| c as f64 / n).collect())
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last_positive
}

/// `n_annotators` iid categorical draws from `truth`.
pub fn simulate_annotations(truth: &SoftLabel, n_annotators: usize, rng_seed: u64) -> Result<AnnotationSet> {
    simulate_noisy_annotations(truth, n_annotators, rng_seed, 0.0)
}

/// As [`simulate_annotations`], but each vote is independently replaced by a
/// uniformly random class with probability `flip_rate`.
pub fn simulate_noisy_annotations(
    truth: &SoftLabel,
    n_annotators: usize,
    rng_seed: u64,
    flip_rate: f64,
) -> Result<AnnotationSet> {
    if n_annotators == 0 {
        return Err(Error::InvalidArgument("n_annotators must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::InvalidArgument(format!("flip rate {flip_rate} outside [0,1]")));
    }
    // Re-validate: deserialized labels bypass the constructor.
    let truth = SoftLabel::new(truth.probs.clone())?;
    let k = truth.k();
    let mut rng = rng_for(rng_seed, stream::ANNOTATE, 0);
    let mut set = AnnotationSet::new(k)?;
    for _ in 0..n_annotators {
        let class_index = if flip_rate > 0.0 && rng.random::<f64>() < flip_rate {
            rng.random_range(0..k)
        } else {
            draw_categorical(&mut rng, truth.probs())
        };
        set.push(Annotation { class_index })?;
    }
    Ok(set)
}

/// Draws a ground-truth distribution from an imbalanced class prior.
///
/// With probability `pure_prob` the label is one-hot with its class drawn
/// from `class_priors`; otherwise it is a Dirichlet draw with parameter
/// `concentration * class_priors * k`, so the mean is the prior itself.
pub fn sample_prior_soft_label(
    class_priors: &[f64],
    concentration: f64,
    pure_prob: f64,
    rng_seed: u64,
) -> Result<SoftLabel> {
    let priors = SoftLabel::new(class_priors.to_vec())
        .map_err(|e| Error::InvalidArgument(format!("class priors: {e}")))?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration {concentration} must be positive")));
    }
    if !(0.0..=1.0).contains(&pure_prob) {
        return Err(Error::InvalidArgument(format!("pure_prob {pure_prob} outside [0,1]")));
    }
    let k = priors.k();
    let mut rng = rng_for(rng_seed, stream::STATE, 0);
    if rng.random::<f64>() < pure_prob {
        let class = draw_categorical(&mut rng, priors.probs());
        return SoftLabel::one_hot(class, k);
    }
    let mut draws = vec![0.0; k];
    for (draw, &prior) in draws.iter_mut().zip(priors.probs()) {
        if prior > 0.0 {
            let alpha = concentration * prior * k as f64;
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidArgument(format!("dirichlet parameter {alpha}: {e}")))?;
            *draw = gamma.sample(&mut rng);
        }
    }
    let total: f64 = draws.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        // Every gamma draw underflowed (tiny alphas); fall back to the prior mode.
        return SoftLabel::one_hot(priors.argmax(), k);
    }
    SoftLabel::new(draws.into_iter().map(|d| d / total).collect())
}

/// Header of the annotation table.
pub const ANNOTATION_HEADER: &str = "item_index,annotator_index,class_index";

/// Writes `item_index,annotator_index,class_index` rows, one per annotation.
pub fn write_annotation_table<W: Write>(mut out: W, items: &[(usize, AnnotationSet)]) -> Result<()> {
    writeln!(out, "{ANNOTATION_HEADER}")?;
    for (item, set) in items {
        for (annotator, a) in set.annotations().iter().enumerate() {
            writeln!(out, "{item},{annotator},{}", a.class_index)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an annotation table back, grouping rows by item in ascending item order.
/// Within an item, annotations are ordered by annotator index.
pub fn read_annotation_table<R: BufRead>(input: R, k: usize) -> Result<Vec<(usize, AnnotationSet)>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(ANNOTATION_HEADER) {
        return Err(Error::Table(format!("expected header `{ANNOTATION_HEADER}`")));
    }
    let mut items: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Table(format!("line {}: expected 3 fields", lineno + 2)));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Table(format!("line {}: {e}", lineno + 2)))
        };
        let (item, annotator, class) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        items.entry(item).or_default().push((annotator, class));
    }
    items
        .into_iter()
        .map(|(item, mut rows)| {
            rows.sort_by_key(|&(annotator, _)| annotator);
            let classes: Vec<usize> = rows.into_iter().map(|(_, c)| c).collect();
            Ok((item, AnnotationSet::from_indices(&classes, k)?))
        })
        .collect()
}
