use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{append_row, embed_dataset, sibling, train_to_files, EmbedRequest, TrainRequest};
use crate::embed::TsneConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::nnet::{self, TargetMode, TrainConfig};
use crate::synthgen::{self, Dataset, DatasetManifest, Split};

pub const RESULTS_HEADER: &str =
    "label_mode,n_runs,macro_acc_mean,macro_acc_std,mean_kl_mean,mean_kl_std,ece_mean,ece_std";

const PROVENANCE_HEADER: &str = "seed,label_mode,dataset_sha256,targets_sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSettings {
    pub sample: usize,
    pub tsne: TsneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub manifest: DatasetManifest,
    /// Shared by every run; the seed is offset by the experiment seed index.
    pub train: TrainConfig,
    pub modes: Vec<TargetMode>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    pub out_dir: PathBuf,
    /// t-SNE of the test split for every mode of the first seed.
    #[serde(default)]
    pub embed: Option<EmbedSettings>,
}

fn default_seeds() -> usize {
    3
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds < 1 {
            return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
        }
        let mut distinct = self.modes.clone();
        distinct.sort_by_key(|m| m.as_str());
        distinct.dedup();
        if distinct.len() < 2 || distinct.len() != self.modes.len() {
            return Err(Error::InvalidArgument("an experiment needs at least two distinct label modes".into()));
        }
        self.manifest.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; the deviation is 0 for one value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub label_mode: TargetMode,
    pub n_runs: usize,
    pub macro_acc: MeanStd,
    pub mean_kl: MeanStd,
    pub ece: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub soft: TargetMode,
    pub hard: TargetMode,
    /// Mean macro accuracy of soft minus hard, in percentage points.
    pub acc_delta_pp: f64,
    /// Mean KL of soft divided by mean KL of hard.
    pub kl_ratio: f64,
}

impl Verdict {
    pub fn soft_better_on_both(&self) -> bool {
        self.acc_delta_pp > 0.0 && self.kl_ratio < 1.0
    }

    pub fn line(&self) -> String {
        format!(
            "{} vs {}: macro_acc {:+.2} pp, mean_kl ratio {:.3}, soft better on both metrics: {}",
            self.soft,
            self.hard,
            self.acc_delta_pp,
            self.kl_ratio,
            if self.soft_better_on_both() { "yes" } else { "no" }
        )
    }
}

impl ResultsTable {
    /// Aggregates per-run reports, one row per mode in the order given.
    pub fn from_runs(modes: &[TargetMode], runs: &[RunRecord]) -> ResultsTable {
        let rows = modes
            .iter()
            .filter_map(|&mode| {
                let reports: Vec<&EvalReport> = runs.iter().filter(|r| r.mode == mode).map(|r| &r.report).collect();
                if reports.is_empty() {
                    return None;
                }
                let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
                Some(ResultsRow {
                    label_mode: mode,
                    n_runs: reports.len(),
                    macro_acc: col(|r| r.macro_acc),
                    mean_kl: col(|r| r.mean_kl),
                    ece: col(|r| r.ece),
                })
            })
            .collect();
        ResultsTable { rows }
    }

    pub fn row(&self, mode: TargetMode) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.label_mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.label_mode, r.n_runs, r.macro_acc.mean, r.macro_acc.std, r.mean_kl.mean, r.mean_kl.std, r.ece.mean, r.ece.std
            );
        }
        s
    }

    /// Soft vs hard comparisons for every pair drawn from the same label source.
    pub fn verdicts(&self) -> Vec<Verdict> {
        let pairs = [
            (TargetMode::GroundTruthSoft, TargetMode::GroundTruthHard),
            (TargetMode::SimulatedSoft, TargetMode::SimulatedHard),
        ];
        pairs
            .iter()
            .filter_map(|&(soft, hard)| {
                let (s, h) = (self.row(soft)?, self.row(hard)?);
                Some(Verdict {
                    soft,
                    hard,
                    acc_delta_pp: 100.0 * (s.macro_acc.mean - h.macro_acc.mean),
                    kl_ratio: s.mean_kl.mean / h.mean_kl.mean,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_index: usize,
    pub train_seed: u64,
    pub mode: TargetMode,
    pub dataset_sha256: String,
    pub targets_sha256: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ResultsTable,
    pub runs: Vec<RunRecord>,
    pub verdicts: Vec<Verdict>,
}

/// Runs every seed × mode, writing artifacts under `spec.out_dir`:
/// `seed{s}/dataset.sld`, `seed{s}/{mode}.slm` (+ sidecars), `eval.csv` and
/// `provenance.csv` (appended run by run), then `results.csv` and `verdict.txt`.
pub fn run_experiment(spec: &ExperimentSpec, progress: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    let eval_path = spec.out_dir.join("eval.csv");
    let provenance_path = spec.out_dir.join("provenance.csv");
    for p in [&eval_path, &provenance_path] {
        if p.exists() {
            fs::remove_file(p)?;
        }
    }

    let samples = synthgen::generate_dataset(&spec.manifest)?;
    let [h, w] = spec.manifest.image_size;
    let pool = Dataset::from_synthetic(&samples, h, w);
    drop(samples);

    let mut runs = Vec::new();
    for s in 0..spec.n_seeds {
        let seed_dir = spec.out_dir.join(format!("seed{s}"));
        fs::create_dir_all(&seed_dir)?;
        let split = pool.resplit(spec.manifest.split_fractions, spec.manifest.seed, s as u64)?;
        let manifest = DatasetManifest { split_seed: Some(s as u64), ..spec.manifest.clone() };
        let dataset_path = seed_dir.join("dataset.sld");
        synthgen::write_dataset(&dataset_path, &split, Some(&manifest))?;
        drop(split);
        let dataset = synthgen::read_dataset(&dataset_path)?;

        for &mode in &spec.modes {
            progress(&format!("seed {s}: training {mode}"));
            let config = TrainConfig { target_mode: mode, seed: spec.train.seed.wrapping_add(s as u64), ..spec.train.clone() };
            let model_path = seed_dir.join(format!("{mode}.slm"));
            let trained = train_to_files(&TrainRequest {
                dataset: dataset_path.clone(),
                config: config.clone(),
                annotations: None,
                out: model_path.clone(),
                log: None,
            })?;
            let report = nnet::evaluate_split(&trained.network, &dataset, Split::Test)?;
            let run_id = format!("seed{s}-{mode}");
            append_row(&eval_path, metrics::EVAL_HEADER, &metrics::eval_row(&run_id, config.seed, mode.as_str(), &report))?;
            append_row(
                &provenance_path,
                PROVENANCE_HEADER,
                &format!("{s},{mode},{},{}", trained.meta.dataset_sha256, trained.meta.targets_sha256),
            )?;
            progress(&format!(
                "seed {s}: {mode} test macro_acc {:.4} mean_kl {:.4} ece {:.4}",
                report.macro_acc, report.mean_kl, report.ece
            ));
            if let (0, Some(settings)) = (s, &spec.embed) {
                progress(&format!("seed {s}: embedding {mode}"));
                embed_dataset(
                    &trained.network,
                    &dataset,
                    &EmbedRequest {
                        model: model_path.clone(),
                        dataset: dataset_path.clone(),
                        split: Split::Test,
                        sample: settings.sample,
                        tsne: settings.tsne.clone(),
                        out_csv: sibling(&model_path, ".tsne.csv"),
                        out_svg: sibling(&model_path, ".tsne.svg"),
                    },
                )?;
            }
            runs.push(RunRecord {
                seed_index: s,
                train_seed: config.seed,
                mode,
                dataset_sha256: trained.meta.dataset_sha256,
                targets_sha256: trained.meta.targets_sha256,
                report,
            });
        }
    }

    let table = ResultsTable::from_runs(&spec.modes, &runs);
    let verdicts = table.verdicts();
    fs::write(spec.out_dir.join("results.csv"), table.to_csv())?;
    let mut verdict_text: String = verdicts.iter().map(|v| v.line() + "\n").collect();
    if verdicts.is_empty() {
        verdict_text.push_str("no soft/hard pair among the requested modes\n");
    }
    fs::write(spec.out_dir.join("verdict.txt"), verdict_text)?;
    Ok(ExperimentOutcome { table, runs, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_single_value() {
        assert_eq!(MeanStd::of(&[0.7]), MeanStd { mean: 0.7, std: 0.0 });
    }

    #[test]
    fn mean_std_sample_deviation() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-12);
    }

    fn report(acc: f64, kl: f64) -> EvalReport {
        EvalReport { macro_acc: acc, mean_kl: kl, ece: 0.1, per_class_recall: vec![], n_items: 10 }
    }

    fn run(mode: TargetMode, acc: f64, kl: f64) -> RunRecord {
        RunRecord {
            seed_index: 0,
            train_seed: 0,
            mode,
            dataset_sha256: String::new(),
            targets_sha256: String::new(),
            report: report(acc, kl),
        }
    }

    #[test]
    fn table_and_verdict() {
        let modes = [TargetMode::GroundTruthSoft, TargetMode::GroundTruthHard];
        let runs = vec![
            run(TargetMode::GroundTruthSoft, 0.8, 0.2),
            run(TargetMode::GroundTruthHard, 0.7, 0.8),
            run(TargetMode::GroundTruthSoft, 0.9, 0.2),
            run(TargetMode::GroundTruthHard, 0.7, 0.8),
        ];
        let t = ResultsTable::from_runs(&modes, &runs);
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.macro_acc.std >= 0.0 && r.n_runs == 2));
        let v = &t.verdicts()[0];
        assert!((v.acc_delta_pp - 15.0).abs() < 1e-9);
        assert!((v.kl_ratio - 0.25).abs() < 1e-12);
        assert!(v.soft_better_on_both());
        let csv = t.to_csv();
        assert!(csv.starts_with(RESULTS_HEADER));
        assert!(csv.contains("gt-soft,2,0.850000,0.070711,0.200000,0.000000,0.100000,0.000000"));
    }

    #[test]
    fn spec_needs_two_modes() {
        let mut spec = ExperimentSpec {
            manifest: DatasetManifest::default(),
            train: TrainConfig::default(),
            modes: vec![TargetMode::GroundTruthSoft],
            n_seeds: 1,
            out_dir: PathBuf::from("unused"),
            embed: None,
        };
        assert!(spec.validate().is_err());
        spec.modes.push(TargetMode::GroundTruthSoft);
        assert!(spec.validate().is_err());
        spec.modes[1] = TargetMode::GroundTruthHard;
        assert!(spec.validate().is_ok());
        spec.n_seeds = 0;
        assert!(spec.validate().is_err());
    }
}
