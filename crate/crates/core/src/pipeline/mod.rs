//! File-level pipeline steps behind the command-line tool: generate,
//! annotate, train, eval, embed and the multi-seed experiment.

mod experiment;
pub mod svg;

use std::fs::{self, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{self, TsneConfig};
use crate::error::{Error, Result};
use crate::labelkit::{self, AnnotationSet, SoftLabel};
use crate::metrics::{self, EvalReport};
use crate::nnet::{self, Network, TargetMode, TrainConfig, TrainingLog};
use crate::synthgen::{self, Dataset, DatasetManifest, Split};

pub use experiment::{
    run_experiment, EmbedSettings, ExperimentOutcome, ExperimentSpec, MeanStd, ResultsRow, ResultsTable, RunRecord,
    Verdict, RESULTS_HEADER,
};

/// Appends `row` to a CSV file, writing `header` first if the file is new or empty.
pub fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

/// SHA-256 over the little-endian f32 encoding of the targets.
pub fn targets_digest(targets: &[SoftLabel]) -> String {
    let mut h = Sha256::new();
    for t in targets {
        for &p in t.probs() {
            h.update((p as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Appends `suffix` to the full file name (`model.slm` -> `model.slm.json`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub count: usize,
    pub split_counts: [usize; 3],
    pub pure_count: usize,
    pub sha256: String,
}

/// Generates a dataset and writes it with its manifest sidecar.
pub fn generate(manifest: &DatasetManifest, out: &Path) -> Result<GenerateSummary> {
    let samples = synthgen::generate_dataset(manifest)?;
    let [h, w] = manifest.image_size;
    let dataset = Dataset::from_synthetic(&samples, h, w);
    create_parent(out)?;
    synthgen::write_dataset(out, &dataset, Some(manifest))?;
    Ok(GenerateSummary {
        count: dataset.len(),
        split_counts: dataset.split_counts(),
        pure_count: samples.iter().filter(|s| s.state.is_pure()).count(),
        sha256: dataset.digest(),
    })
}

#[derive(Debug, Clone)]
pub struct AnnotateRequest {
    pub dataset: PathBuf,
    /// `None` annotates every item.
    pub split: Option<Split>,
    pub annotators: usize,
    pub flip_rate: f64,
    pub seed: u64,
    pub out: PathBuf,
}

/// Simulates annotations and writes the annotation table. Returns the row count.
pub fn annotate(req: &AnnotateRequest) -> Result<usize> {
    let dataset = synthgen::read_dataset(&req.dataset)?;
    let indices: Vec<usize> = match req.split {
        Some(s) => dataset.indices(s),
        None => (0..dataset.len()).collect(),
    };
    let items = nnet::simulate_item_annotations(&dataset, &indices, req.annotators, req.flip_rate, req.seed)?;
    create_parent(&req.out)?;
    labelkit::write_annotation_table(BufWriter::new(fs::File::create(&req.out)?), &items)?;
    Ok(items.iter().map(|(_, s)| s.len()).sum())
}

/// Run metadata written next to every model as `<model>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub label_mode: TargetMode,
    pub seed: u64,
    pub dataset_sha256: String,
    pub targets_sha256: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub dataset: PathBuf,
    pub config: TrainConfig,
    /// Annotation table to aggregate instead of simulating (simulated modes only).
    pub annotations: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to `<out>.log.csv`.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: TrainingLog,
    pub meta: ModelMeta,
    pub log_path: PathBuf,
}

fn targets_from_table(dataset: &Dataset, indices: &[usize], table: &Path, soft: bool) -> Result<Vec<SoftLabel>> {
    let items = labelkit::read_annotation_table(BufReader::new(fs::File::open(table)?), dataset.num_classes)?;
    let by_item: std::collections::HashMap<usize, AnnotationSet> = items.into_iter().collect();
    let sets = indices
        .iter()
        .map(|i| {
            by_item
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Table(format!("no annotations for training item {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    nnet::aggregate(&sets, soft)
}

/// Trains on a dataset file and writes the model, its log and its metadata sidecar.
pub fn train_to_files(req: &TrainRequest) -> Result<TrainOutcome> {
    let dataset = synthgen::read_dataset(&req.dataset)?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let targets = match (&req.annotations, req.config.target_mode.is_simulated()) {
        (Some(table), true) => targets_from_table(&dataset, &train_idx, table, req.config.target_mode.is_soft())?,
        (Some(_), false) => {
            return Err(Error::InvalidArgument("an annotation table only applies to sim-* label modes".into()))
        }
        (None, _) => nnet::build_targets(&dataset, &train_idx, &req.config)?,
    };
    let (network, log) = nnet::train_on_targets(&dataset, &train_idx, &targets, &req.config)?;
    let meta = ModelMeta {
        label_mode: req.config.target_mode,
        seed: req.config.seed,
        dataset_sha256: dataset.digest(),
        targets_sha256: targets_digest(&targets),
        config: req.config.clone(),
    };
    create_parent(&req.out)?;
    nnet::save_model(&req.out, &network)?;
    fs::write(sibling(&req.out, ".json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let log_path = req.log.clone().unwrap_or_else(|| sibling(&req.out, ".log.csv"));
    create_parent(&log_path)?;
    log.write_csv(BufWriter::new(fs::File::create(&log_path)?))?;
    Ok(TrainOutcome { network, log, meta, log_path })
}

pub fn read_model_meta(model: &Path) -> Result<ModelMeta> {
    Ok(serde_json::from_str(&fs::read_to_string(sibling(model, ".json"))?)?)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    /// CSV file the report row is appended to.
    pub out: Option<PathBuf>,
    /// Defaults to the model file stem.
    pub run_id: Option<String>,
}

/// Evaluates a model on one split; returns the report and its table row.
pub fn eval_command(req: &EvalRequest) -> Result<(EvalReport, String)> {
    let dataset = synthgen::read_dataset(&req.dataset)?;
    let net = nnet::load_model_for(&req.model, dataset.num_classes)?;
    let report = nnet::evaluate_split(&net, &dataset, req.split)?;
    let meta = read_model_meta(&req.model).ok();
    let run_id = req.run_id.clone().unwrap_or_else(|| {
        req.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    let (seed, mode) = meta
        .map(|m| (m.seed, m.label_mode.as_str().to_string()))
        .unwrap_or((0, "unknown".into()));
    let row = metrics::eval_row(&run_id, seed, &mode, &report);
    if let Some(out) = &req.out {
        create_parent(out)?;
        append_row(out, metrics::EVAL_HEADER, &row)?;
    }
    Ok((report, row))
}

#[derive(Debug, Clone)]
pub struct EmbedRequest {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub split: Split,
    pub sample: usize,
    pub tsne: TsneConfig,
    pub out_csv: PathBuf,
    pub out_svg: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutcome {
    pub n_points: usize,
    /// Set when `sample` exceeded the split size.
    pub clamped_from: Option<usize>,
    pub final_objective: f64,
    pub unconverged_rows: usize,
}

/// Embeds a seeded subsample of a split's GAP features and writes the table and SVG.
pub fn embed_command(req: &EmbedRequest) -> Result<EmbedOutcome> {
    let dataset = synthgen::read_dataset(&req.dataset)?;
    let net = nnet::load_model_for(&req.model, dataset.num_classes)?;
    embed_dataset(&net, &dataset, req)
}

pub(crate) fn embed_dataset(net: &Network, dataset: &Dataset, req: &EmbedRequest) -> Result<EmbedOutcome> {
    let split_idx = dataset.indices(req.split);
    if split_idx.is_empty() {
        return Err(Error::EmptySplit(req.split.name().into()));
    }
    let clamped_from = (req.sample > split_idx.len()).then_some(req.sample);
    let picks = embed::subsample(split_idx.len(), req.sample, req.tsne.seed);
    let items: Vec<usize> = picks.iter().map(|&j| split_idx[j]).collect();
    let mut tsne_cfg = req.tsne.clone();
    // tiny samples cannot support the requested neighbourhood size
    tsne_cfg.perplexity = tsne_cfg.perplexity.min(items.len().saturating_sub(1) as f64);
    let features = embed::extract_embeddings(net, dataset, &items, 128)?;
    let embedding = embed::tsne(&features, &tsne_cfg)?;
    let labels: Vec<SoftLabel> = items.iter().map(|&i| dataset.samples[i].label()).collect::<Result<_>>()?;
    create_parent(&req.out_csv)?;
    embed::write_embedding_table(BufWriter::new(fs::File::create(&req.out_csv)?), &items, &embedding, &labels)?;
    create_parent(&req.out_svg)?;
    let title = format!("t-SNE of GAP features, {} split, {} points", req.split.name(), items.len());
    fs::write(&req.out_svg, svg::scatter_svg(&embedding.points, &labels, &title))?;
    Ok(EmbedOutcome {
        n_points: items.len(),
        clamped_from,
        final_objective: embedding.final_objective().unwrap_or(f64::NAN),
        unconverged_rows: embedding.unconverged_rows,
    })
}
