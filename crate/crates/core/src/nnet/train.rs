use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{soft_cross_entropy, softmax_rows, targets_tensor};
use super::network::{Network, DEFAULT_CHANNELS};
use super::optim::{cosine_lr, Sgd};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::labelkit::{self, AnnotationSet, SoftLabel};
use crate::metrics;
use crate::rng::{derive_seed, rng_for, stream};
use crate::synthgen::{Dataset, Split};

/// Where the training targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetMode {
    #[serde(rename = "gt-soft")]
    GroundTruthSoft,
    #[serde(rename = "gt-hard")]
    GroundTruthHard,
    #[serde(rename = "sim-soft")]
    SimulatedSoft,
    #[serde(rename = "sim-hard")]
    SimulatedHard,
}

impl TargetMode {
    pub const ALL: [TargetMode; 4] = [
        TargetMode::GroundTruthSoft,
        TargetMode::GroundTruthHard,
        TargetMode::SimulatedSoft,
        TargetMode::SimulatedHard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::GroundTruthSoft => "gt-soft",
            TargetMode::GroundTruthHard => "gt-hard",
            TargetMode::SimulatedSoft => "sim-soft",
            TargetMode::SimulatedHard => "sim-hard",
        }
    }

    pub fn is_soft(self) -> bool {
        matches!(self, TargetMode::GroundTruthSoft | TargetMode::SimulatedSoft)
    }

    pub fn is_simulated(self) -> bool {
        matches!(self, TargetMode::SimulatedSoft | TargetMode::SimulatedHard)
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown label mode `{s}` (gt-soft, gt-hard, sim-soft, sim-hard)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    /// Cosine annealing restarted every `period_epochs` epochs.
    WarmRestarts { period_epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub target_mode: TargetMode,
    /// Annotators per item for the simulated modes.
    pub annotators: usize,
    /// Per-vote uniform relabeling probability for the simulated modes.
    pub flip_rate: f64,
    /// Conv block widths of the backbone.
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            base_lr: 0.1,
            weight_decay: 0.0005,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            seed: 0,
            target_mode: TargetMode::GroundTruthSoft,
            annotators: labelkit::DEFAULT_ANNOTATORS,
            flip_rate: 0.0,
            widths: DEFAULT_CHANNELS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning rate", self.base_lr)?;
        if !(self.weight_decay >= 0.0 && self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0 and momentum in [0,1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epochs must be at least 1".into()));
        }
        if let Schedule::WarmRestarts { period_epochs: 0 } = self.schedule {
            return Err(Error::InvalidArgument("restart period must be at least 1 epoch".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one conv block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_acc: f64,
    pub val_kl: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_macro_acc,val_kl,lr";

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRAIN_LOG_HEADER}")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.8}",
                e.epoch, e.train_loss, e.val_macro_acc, e.val_kl, e.lr
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulated annotations for the given items. Item `i` draws from its own
/// stream keyed by `(seed, i)`, so results do not depend on the index list.
pub fn simulate_item_annotations(
    dataset: &Dataset,
    indices: &[usize],
    annotators: usize,
    flip_rate: f64,
    seed: u64,
) -> Result<Vec<(usize, AnnotationSet)>> {
    indices
        .iter()
        .map(|&i| {
            let truth = dataset.samples[i].label()?;
            let item_seed = derive_seed(seed, stream::ANNOTATE, i as u64);
            Ok((i, labelkit::simulate_noisy_annotations(&truth, annotators, item_seed, flip_rate)?))
        })
        .collect()
}

/// Aggregates annotation sets into training targets for `mode`.
pub fn aggregate(sets: &[AnnotationSet], soft: bool) -> Result<Vec<SoftLabel>> {
    sets.iter()
        .map(|s| {
            if soft {
                labelkit::average(s)
            } else {
                labelkit::majority_vote(s)?.to_soft(s.k())
            }
        })
        .collect()
}

/// Training targets for `indices` under `config.target_mode`.
pub fn build_targets(dataset: &Dataset, indices: &[usize], config: &TrainConfig) -> Result<Vec<SoftLabel>> {
    match config.target_mode {
        TargetMode::GroundTruthSoft => indices.iter().map(|&i| dataset.samples[i].label()).collect(),
        TargetMode::GroundTruthHard => indices
            .iter()
            .map(|&i| {
                let l = dataset.samples[i].label()?;
                l.to_hard().to_soft(l.k())
            })
            .collect(),
        mode => {
            let sets: Vec<AnnotationSet> =
                simulate_item_annotations(dataset, indices, config.annotators, config.flip_rate, config.seed)?
                    .into_iter()
                    .map(|(_, s)| s)
                    .collect();
            aggregate(&sets, mode.is_soft())
        }
    }
}

/// `[B, H, W, 3]` batch of the given items, scaled to `[0, 1]`.
pub fn batch_tensor(dataset: &Dataset, indices: &[usize]) -> Tensor {
    let per = dataset.pixels_per_image();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend(dataset.samples[i].pixels.iter().map(|&p| p as f32 / 255.0));
    }
    Tensor::new(vec![indices.len(), dataset.height, dataset.width, 3], data).expect("pixel count matches header")
}

#[derive(Debug, Clone)]
pub struct Predictions {
    pub probs: Vec<SoftLabel>,
    /// GAP activations, one row per item.
    pub embeddings: Vec<Vec<f32>>,
}

/// Softmax outputs and GAP embeddings for `indices`, in order.
pub fn predict(net: &Network, dataset: &Dataset, indices: &[usize], batch_size: usize) -> Result<Predictions> {
    net.check_classes(dataset.num_classes)?;
    let mut probs = Vec::with_capacity(indices.len());
    let mut embeddings = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let out = net.forward(&batch_tensor(dataset, chunk))?;
        let p = softmax_rows(&out.logits);
        for r in 0..chunk.len() {
            probs.push(SoftLabel::from_f32(p.row(r))?);
            embeddings.push(out.embeddings.row(r).to_vec());
        }
    }
    Ok(Predictions { probs, embeddings })
}

/// Metrics of `net` on one split against the stored ground-truth labels.
pub fn evaluate_split(net: &Network, dataset: &Dataset, split: Split) -> Result<metrics::EvalReport> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let preds = predict(net, dataset, &indices, 256)?;
    let truths: Vec<SoftLabel> = indices.iter().map(|&i| dataset.samples[i].label()).collect::<Result<_>>()?;
    metrics::evaluate(&preds.probs, &truths)
}

/// Trains on the dataset's train split with targets chosen by `config.target_mode`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Network, TrainingLog)> {
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let targets = build_targets(dataset, &train_idx, config)?;
    train_on_targets(dataset, &train_idx, &targets, config)
}

/// Mini-batch SGD over `train_idx` with the given per-item targets.
///
/// Batches are reshuffled every epoch (final partial batch kept) and the
/// cosine schedule runs per iteration over the whole run. Returns the
/// final-epoch network.
pub fn train_on_targets(
    dataset: &Dataset,
    train_idx: &[usize],
    targets: &[SoftLabel],
    config: &TrainConfig,
) -> Result<(Network, TrainingLog)> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if targets.len() != train_idx.len() {
        return Err(Error::ShapeMismatch(format!("{} targets for {} items", targets.len(), train_idx.len())));
    }
    if let Some(t) = targets.iter().find(|t| t.k() != dataset.num_classes) {
        return Err(Error::ClassCountMismatch { model: dataset.num_classes, requested: t.k() });
    }
    let mut net = Network::small_cnn(dataset.num_classes, &config.widths, config.seed)?;
    let mut opt = Sgd::new(&net, config.momentum as f32, config.weight_decay as f32);
    let val_idx = dataset.indices(Split::Val);
    let val_truths: Vec<SoftLabel> = val_idx.iter().map(|&i| dataset.samples[i].label()).collect::<Result<_>>()?;

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let restart = match config.schedule {
        Schedule::Cosine => None,
        Schedule::WarmRestarts { period_epochs } => Some(period_epochs * steps_per_epoch),
    };

    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, stream::SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0f64;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<usize> = chunk.iter().map(|&j| train_idx[j]).collect();
            let batch_targets: Vec<SoftLabel> = chunk.iter().map(|&j| targets[j].clone()).collect();
            lr = cosine_lr(step, total_steps, config.base_lr, restart)?;
            let (out, cache) = net.forward_with_cache(&batch_tensor(dataset, &items))?;
            let (loss, dlogits) = soft_cross_entropy(&out.logits, &targets_tensor(&batch_targets)?)?;
            let grads = net.backward(&cache, &dlogits)?;
            opt.step(&mut net, &grads, lr as f32)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            step += 1;
        }
        let (val_macro_acc, val_kl) = if val_idx.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let preds = predict(&net, dataset, &val_idx, 256)?;
            (
                metrics::macro_accuracy(&preds.probs, &val_truths)?.value,
                metrics::mean_kl(&val_truths, &preds.probs)?,
            )
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_macro_acc,
            val_kl,
            lr,
        });
    }
    Ok((net, log))
}
