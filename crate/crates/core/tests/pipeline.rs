use std::fs;
use std::path::Path;

use softlab::embed::TsneConfig;
use softlab::nnet::{TargetMode, TrainConfig};
use softlab::pipeline::{self, svg, EmbedRequest, EvalRequest, ExperimentSpec, TrainRequest};
use softlab::synthgen::{self, DatasetManifest, Split};
use softlab::SoftLabel;

fn tiny_manifest(count: usize) -> DatasetManifest {
    DatasetManifest { seed: 5, count, image_size: [16, 16], ..Default::default() }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 16, widths: vec![4, 8], ..Default::default() }
}

fn spec(out: &Path, n_seeds: usize) -> ExperimentSpec {
    ExperimentSpec {
        manifest: tiny_manifest(90),
        train: tiny_train(),
        modes: vec![TargetMode::GroundTruthSoft, TargetMode::GroundTruthHard],
        n_seeds,
        out_dir: out.to_path_buf(),
        embed: None,
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn experiment_is_reproducible_and_isolates_targets() {
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline::run_experiment(&spec(&dir.path().join("a"), 2), &mut |_| {}).unwrap();
    pipeline::run_experiment(&spec(&dir.path().join("b"), 2), &mut |_| {}).unwrap();
    let table = read(&dir.path().join("a/results.csv"));
    assert_eq!(table, read(&dir.path().join("b/results.csv")));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(read(&dir.path().join("a/eval.csv")).lines().count(), 5);
    assert!(read(&dir.path().join("a/verdict.txt")).starts_with("gt-soft vs gt-hard"));

    for s in 0..2 {
        let runs: Vec<_> = a.runs.iter().filter(|r| r.seed_index == s).collect();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].dataset_sha256, runs[1].dataset_sha256);
        assert_ne!(runs[0].targets_sha256, runs[1].targets_sha256);
        let on_disk = synthgen::read_dataset(&dir.path().join(format!("a/seed{s}/dataset.sld"))).unwrap();
        assert_eq!(on_disk.digest(), runs[0].dataset_sha256);
    }
    assert_ne!(a.runs[0].dataset_sha256, a.runs[2].dataset_sha256, "seeds resplit the pool");
    assert_eq!(read(&dir.path().join("a/provenance.csv")).lines().count(), 5);
}

#[test]
fn single_seed_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline::run_experiment(&spec(dir.path(), 1), &mut |_| {}).unwrap();
    assert_eq!(out.table.rows.len(), 2);
    for r in &out.table.rows {
        assert_eq!((r.macro_acc.std, r.mean_kl.std, r.ece.std), (0.0, 0.0, 0.0));
    }
}

#[test]
fn generate_train_eval_embed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.sld");
    let g = pipeline::generate(&tiny_manifest(100), &data).unwrap();
    assert_eq!(g.split_counts, [60, 20, 20]);
    let again = dir.path().join("again.sld");
    pipeline::generate(&tiny_manifest(100), &again).unwrap();
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
    assert_eq!(synthgen::read_manifest(&data).unwrap(), tiny_manifest(100));

    let model = dir.path().join("m.slm");
    let trained = pipeline::train_to_files(&TrainRequest {
        dataset: data.clone(),
        config: TrainConfig { target_mode: TargetMode::SimulatedSoft, ..tiny_train() },
        annotations: None,
        out: model.clone(),
        log: None,
    })
    .unwrap();
    assert_eq!(read(&trained.log_path).lines().count(), 3);
    assert_eq!(pipeline::read_model_meta(&model).unwrap().label_mode, TargetMode::SimulatedSoft);

    let eval_csv = dir.path().join("eval.csv");
    let req = |split| EvalRequest { model: model.clone(), dataset: data.clone(), split, out: Some(eval_csv.clone()), run_id: None };
    let (_, r1) = pipeline::eval_command(&req(Split::Test)).unwrap();
    let (_, r2) = pipeline::eval_command(&req(Split::Test)).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.starts_with("m,0,sim-soft,"));
    pipeline::eval_command(&req(Split::Val)).unwrap();
    assert_eq!(read(&eval_csv).lines().count(), 4);

    let embed = |sample| EmbedRequest {
        model: model.clone(),
        dataset: data.clone(),
        split: Split::Test,
        sample,
        tsne: TsneConfig { iterations: 300, perplexity: 5.0, ..Default::default() },
        out_csv: dir.path().join("e.csv"),
        out_svg: dir.path().join("e.svg"),
    };
    let e = pipeline::embed_command(&embed(12)).unwrap();
    assert_eq!((e.n_points, e.clamped_from), (12, None));
    assert_eq!(read(&dir.path().join("e.csv")).lines().count(), 13);
    let e = pipeline::embed_command(&embed(500)).unwrap();
    assert_eq!((e.n_points, e.clamped_from), (20, Some(500)));
    let svg_text = read(&dir.path().join("e.svg"));
    assert_eq!(svg_text.matches("<circle").count(), 20);

    let ds = synthgen::read_dataset(&data).unwrap();
    for line in read(&dir.path().join("e.csv")).lines().skip(1) {
        let item: usize = line.split(',').next().unwrap().parse().unwrap();
        let label = ds.samples[item].label().unwrap();
        assert!(svg_text.contains(&svg::hex_color(svg::blend_color(&label))));
    }
}

#[test]
fn annotation_table_drives_simulated_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.sld");
    pipeline::generate(&tiny_manifest(40), &data).unwrap();
    let table = dir.path().join("ann.csv");
    let rows = pipeline::annotate(&pipeline::AnnotateRequest {
        dataset: data.clone(),
        split: Some(Split::Train),
        annotators: 15,
        flip_rate: 0.0,
        seed: 0,
        out: table.clone(),
    })
    .unwrap();
    assert_eq!(rows, 24 * 15);

    let train = |annotations: Option<std::path::PathBuf>, mode| {
        pipeline::train_to_files(&TrainRequest {
            dataset: data.clone(),
            config: TrainConfig { target_mode: mode, ..tiny_train() },
            annotations,
            out: dir.path().join("m.slm"),
            log: None,
        })
    };
    let from_table = train(Some(table.clone()), TargetMode::SimulatedHard).unwrap();
    let simulated = train(None, TargetMode::SimulatedHard).unwrap();
    assert_eq!(from_table.meta.targets_sha256, simulated.meta.targets_sha256);
    assert_eq!(from_table.network, simulated.network);
    assert!(train(Some(table), TargetMode::GroundTruthHard).is_err());
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.sld");
    pipeline::generate(&tiny_manifest(30), &data).unwrap();
    let net = softlab::nnet::Network::small_cnn(4, &[4, 8], 0).unwrap();
    let model = dir.path().join("four.slm");
    softlab::nnet::save_model(&model, &net).unwrap();
    let err = pipeline::eval_command(&EvalRequest { model, dataset: data, split: Split::Test, out: None, run_id: None });
    assert!(matches!(err, Err(softlab::Error::ClassCountMismatch { .. })));
}

#[test]
fn perfect_predictions_score_perfectly_on_pure_data() {
    let manifest = DatasetManifest { pure_fraction: 1.0, ..tiny_manifest(60) };
    let samples = synthgen::generate_dataset(&manifest).unwrap();
    let truths: Vec<SoftLabel> = samples.iter().map(|s| s.soft_label.clone()).collect();
    assert!(truths.iter().all(SoftLabel::is_one_hot));
    let r = softlab::metrics::evaluate(&truths, &truths).unwrap();
    assert_eq!((r.macro_acc, r.mean_kl, r.ece), (1.0, 0.0, 0.0));
}
