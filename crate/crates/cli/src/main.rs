//! `softlab` command-line tool.
//!
//! Every option can also come from a JSON object passed with `--config`,
//! keyed by the long flag name (`"pure-frac": 0.4`). Flags given on the
//! command line win over the file, the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use softlab::embed::TsneConfig;
use softlab::nnet::{Schedule, TargetMode, TrainConfig, DEFAULT_CHANNELS};
use softlab::pipeline::{self, AnnotateRequest, EmbedRequest, EmbedSettings, EvalRequest, ExperimentSpec, TrainRequest};
use softlab::synthgen::{DatasetManifest, Split};
use softlab::{Error, ErrorClass};

const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "softlab", version, about = "Soft-label vs hard-label training on synthetic ambiguous images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (SLD1) and its manifest.
    Generate(GenerateArgs),
    /// Simulate annotators and write an annotation table.
    Annotate(AnnotateArgs),
    /// Train a network and write the model, log and metadata.
    Train(TrainArgs),
    /// Evaluate a model on one split and append a report row.
    Eval(EvalArgs),
    /// t-SNE of GAP features as a CSV table and an SVG scatter.
    Embed(EmbedArgs),
    /// Multi-seed comparison of label modes.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset file to write; the manifest goes to <out>.manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of samples [default: 15000]
    #[arg(long)]
    count: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of pure, single-class samples [default: 0.4]
    #[arg(long = "pure-frac")]
    pure_frac: Option<f64>,
    /// Train,val,test fractions.
    #[arg(long)]
    split: Option<String>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    /// SLD1 dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    split: Option<String>,
    /// Simulated annotators per item [default: 15]
    #[arg(long)]
    annotators: Option<usize>,
    /// Probability that a vote is replaced by a uniform class [default: 0]
    #[arg(long = "flip-rate")]
    flip_rate: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Annotation table to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// SLD1 dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// gt-soft, gt-hard, sim-soft or sim-hard.
    #[arg(long)]
    labels: Option<String>,
    /// Simulated annotators per item [default: 15]
    #[arg(long)]
    annotators: Option<usize>,
    /// Probability that a vote is replaced by a uniform class [default: 0]
    #[arg(long = "flip-rate")]
    flip_rate: Option<f64>,
    /// Annotation table to aggregate instead of simulating (sim-* modes).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate [default: 0.1]
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay [default: 0.0005]
    #[arg(long)]
    wd: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Restart the cosine schedule every N epochs.
    #[arg(long = "restart-epochs")]
    restart_epochs: Option<usize>,
    /// Conv block widths, e.g. 16,32,64.
    #[arg(long)]
    widths: Option<String>,
    /// Initialization, shuffling and simulation seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write; metadata goes to <out>.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to <out>.log.csv.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// SLM1 model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// SLD1 dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// [default: test]
    #[arg(long)]
    split: Option<String>,
    /// CSV file to append the report row to.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label [default: model file stem]
    #[arg(long = "run-id")]
    run_id: Option<String>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// SLM1 model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// SLD1 dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Points to embed, drawn without replacement [default: 1000]
    #[arg(long)]
    sample: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    perplexity: Option<f64>,
    /// t-SNE iterations [default: 5000]
    #[arg(long)]
    iters: Option<usize>,
    /// Subsample and initialization seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding table to write.
    #[arg(long = "out-csv")]
    out_csv: Option<PathBuf>,
    /// Scatter plot to write.
    #[arg(long = "out-svg")]
    out_svg: Option<PathBuf>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Directory for every artifact of the run.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Comma-separated label modes.
    #[arg(long)]
    modes: Option<String>,
    /// Number of resplit seeds [default: 3]
    #[arg(long)]
    seeds: Option<usize>,
    /// Number of samples [default: 15000]
    #[arg(long)]
    count: Option<usize>,
    /// Dataset seed.
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    /// Fraction of pure, single-class samples [default: 0.4]
    #[arg(long = "pure-frac")]
    pure_frac: Option<f64>,
    /// Train,val,test fractions [default: 0.6,0.2,0.2]
    #[arg(long)]
    split: Option<String>,
    /// Square image side in pixels [default: 32]
    #[arg(long)]
    size: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate [default: 0.1]
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay [default: 0.0005]
    #[arg(long)]
    wd: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Simulated annotators per item [default: 15]
    #[arg(long)]
    annotators: Option<usize>,
    /// Probability that a vote is replaced by a uniform class [default: 0]
    #[arg(long = "flip-rate")]
    flip_rate: Option<f64>,
    /// Conv block widths [default: 16,32,64]
    #[arg(long)]
    widths: Option<String>,
    /// Base training seed; seed index s trains with seed + s.
    #[arg(long)]
    seed: Option<u64>,
    /// Also embed the first seed's test split with this many points.
    #[arg(long = "embed-sample")]
    embed_sample: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    perplexity: Option<f64>,
    /// t-SNE iterations [default: 5000]
    #[arg(long)]
    iters: Option<usize>,
    /// JSON file of option values keyed by flag name.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Option values from a `--config` file; keys are long flag names.
struct ConfigFile {
    values: Map<String, Value>,
}

impl ConfigFile {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile { values: Map::new() });
        };
        let text = fs::read_to_string(path).map_err(Error::from)?;
        let values = match serde_json::from_str::<Value>(&text).map_err(Error::from)? {
            Value::Object(map) => map,
            _ => return Err(Error::InvalidArgument("config file must hold a JSON object".into()).into()),
        };
        if let Some(bad) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown config key `{bad}`")).into());
        }
        Ok(ConfigFile { values })
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> CliResult<Option<T>> {
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("config key `{key}`: {e}")).into()),
        }
    }

    /// Flag, then config value, then `default`.
    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> CliResult<T> {
        match flag {
            Some(v) => Ok(v),
            None => self.get(key)?.ok_or_else(|| CliError::Usage(format!("missing required option --{key}"))),
        }
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| CliError::Lib(Error::InvalidArgument(format!("bad {what} entry `{p}`"))))
        })
        .collect()
}

fn parse_fractions(s: &str) -> CliResult<[f64; 3]> {
    let v: Vec<f64> = parse_list(s, "split fraction")?;
    v.try_into()
        .map_err(|_| Error::InvalidArgument(format!("--split needs three fractions, got `{s}`")).into())
}

fn manifest_from(
    cfg: &ConfigFile,
    count: Option<usize>,
    seed: Option<u64>,
    seed_key: &str,
    pure_frac: Option<f64>,
    split: Option<String>,
    size: Option<usize>,
) -> CliResult<DatasetManifest> {
    let d = DatasetManifest::default();
    let split = match cfg.pick(split, "split", String::new())? {
        s if s.is_empty() => d.split_fractions,
        s => parse_fractions(&s)?,
    };
    let side = cfg.pick(size, "size", d.image_size[0])?;
    let m = DatasetManifest {
        seed: cfg.pick(seed, seed_key, d.seed)?,
        count: cfg.pick(count, "count", d.count)?,
        pure_fraction: cfg.pick(pure_frac, "pure-frac", d.pure_fraction)?,
        split_fractions: split,
        image_size: [side, side],
        ..d
    };
    m.validate()?;
    Ok(m)
}

fn widths_from(cfg: &ConfigFile, flag: Option<String>) -> CliResult<Vec<usize>> {
    match cfg.pick(flag, "widths", String::new())? {
        s if s.is_empty() => Ok(DEFAULT_CHANNELS.to_vec()),
        s => parse_list(&s, "width"),
    }
}

fn split_from(cfg: &ConfigFile, flag: Option<String>) -> CliResult<Split> {
    Ok(cfg.pick(flag, "split", "test".to_string())?.parse::<Split>()?)
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref(), &["out", "count", "seed", "pure-frac", "split", "size"])?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let manifest = manifest_from(&cfg, a.count, a.seed, "seed", a.pure_frac, a.split, a.size)?;
    let s = pipeline::generate(&manifest, &out)?;
    println!(
        "wrote {} samples (train {}, val {}, test {}; {} pure) to {}\nsha256 {}",
        s.count,
        s.split_counts[0],
        s.split_counts[1],
        s.split_counts[2],
        s.pure_count,
        out.display(),
        s.sha256
    );
    Ok(())
}

fn cmd_annotate(a: AnnotateArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref(), &["dataset", "split", "annotators", "flip-rate", "seed", "out"])?;
    let split = match cfg.pick(a.split, "split", "all".to_string())?.as_str() {
        "all" => None,
        s => Some(s.parse::<Split>()?),
    };
    let req = AnnotateRequest {
        dataset: cfg.require(a.dataset, "dataset")?,
        split,
        annotators: cfg.pick(a.annotators, "annotators", softlab::labelkit::DEFAULT_ANNOTATORS)?,
        flip_rate: cfg.pick(a.flip_rate, "flip-rate", 0.0)?,
        seed: cfg.pick(a.seed, "seed", 0)?,
        out: cfg.require(a.out, "out")?,
    };
    let rows = pipeline::annotate(&req)?;
    println!("wrote {rows} annotations to {}", req.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(
        a.config.as_deref(),
        &[
            "dataset", "labels", "annotators", "flip-rate", "annotations", "epochs", "batch", "lr", "wd", "momentum",
            "restart-epochs", "widths", "seed", "out", "log",
        ],
    )?;
    let d = TrainConfig::default();
    let labels: String = cfg.require(a.labels, "labels")?;
    let schedule = match cfg.pick(a.restart_epochs, "restart-epochs", 0)? {
        0 => Schedule::Cosine,
        n => Schedule::WarmRestarts { period_epochs: n },
    };
    let config = TrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        batch_size: cfg.pick(a.batch, "batch", d.batch_size)?,
        base_lr: cfg.pick(a.lr, "lr", d.base_lr)?,
        weight_decay: cfg.pick(a.wd, "wd", d.weight_decay)?,
        momentum: cfg.pick(a.momentum, "momentum", d.momentum)?,
        schedule,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        target_mode: labels.parse::<TargetMode>()?,
        annotators: cfg.pick(a.annotators, "annotators", d.annotators)?,
        flip_rate: cfg.pick(a.flip_rate, "flip-rate", d.flip_rate)?,
        widths: widths_from(&cfg, a.widths)?,
    };
    let req = TrainRequest {
        dataset: cfg.require(a.dataset, "dataset")?,
        config,
        annotations: a.annotations.or(cfg.get("annotations")?),
        out: cfg.require(a.out, "out")?,
        log: a.log.or(cfg.get("log")?),
    };
    let out = pipeline::train_to_files(&req)?;
    if let Some(last) = out.log.epochs.last() {
        println!(
            "epoch {}: train_loss {:.4} val_macro_acc {:.4} val_kl {:.4}",
            last.epoch, last.train_loss, last.val_macro_acc, last.val_kl
        );
    }
    println!("wrote model to {} and log to {}", req.out.display(), out.log_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref(), &["model", "dataset", "split", "out", "run-id"])?;
    let req = EvalRequest {
        model: cfg.require(a.model, "model")?,
        dataset: cfg.require(a.dataset, "dataset")?,
        split: split_from(&cfg, a.split)?,
        out: a.out.or(cfg.get("out")?),
        run_id: a.run_id.or(cfg.get("run-id")?),
    };
    let (_, row) = pipeline::eval_command(&req)?;
    println!("{}\n{row}", softlab::metrics::EVAL_HEADER);
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(
        a.config.as_deref(),
        &["model", "dataset", "split", "sample", "perplexity", "iters", "seed", "out-csv", "out-svg"],
    )?;
    let d = TsneConfig::default();
    let req = EmbedRequest {
        model: cfg.require(a.model, "model")?,
        dataset: cfg.require(a.dataset, "dataset")?,
        split: split_from(&cfg, a.split)?,
        sample: cfg.pick(a.sample, "sample", 1000)?,
        tsne: TsneConfig {
            perplexity: cfg.pick(a.perplexity, "perplexity", d.perplexity)?,
            iterations: cfg.pick(a.iters, "iters", d.iterations)?,
            seed: cfg.pick(a.seed, "seed", d.seed)?,
            ..d
        },
        out_csv: cfg.require(a.out_csv, "out-csv")?,
        out_svg: cfg.require(a.out_svg, "out-svg")?,
    };
    let out = pipeline::embed_command(&req)?;
    if let Some(asked) = out.clamped_from {
        eprintln!("warning: --sample {asked} exceeds the split size; using all {} items", out.n_points);
    }
    if out.unconverged_rows > 0 {
        eprintln!("warning: bandwidth search did not converge for {} rows", out.unconverged_rows);
    }
    println!(
        "embedded {} points (final KL {:.4}) to {} and {}",
        out.n_points,
        out.final_objective,
        req.out_csv.display(),
        req.out_svg.display()
    );
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(
        a.config.as_deref(),
        &[
            "out-dir", "modes", "seeds", "count", "data-seed", "pure-frac", "split", "size", "epochs", "batch", "lr",
            "wd", "momentum", "annotators", "flip-rate", "widths", "seed", "embed-sample", "perplexity", "iters",
        ],
    )?;
    let manifest = manifest_from(&cfg, a.count, a.data_seed, "data-seed", a.pure_frac, a.split, a.size)?;
    let d = TrainConfig::default();
    let modes: Vec<TargetMode> = parse_list(&cfg.pick(a.modes, "modes", "gt-soft,gt-hard".to_string())?, "mode")?;
    let train = TrainConfig {
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        batch_size: cfg.pick(a.batch, "batch", d.batch_size)?,
        base_lr: cfg.pick(a.lr, "lr", d.base_lr)?,
        weight_decay: cfg.pick(a.wd, "wd", d.weight_decay)?,
        momentum: cfg.pick(a.momentum, "momentum", d.momentum)?,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        annotators: cfg.pick(a.annotators, "annotators", d.annotators)?,
        flip_rate: cfg.pick(a.flip_rate, "flip-rate", d.flip_rate)?,
        widths: widths_from(&cfg, a.widths)?,
        ..d
    };
    let embed = match a.embed_sample.or(cfg.get("embed-sample")?) {
        None => None,
        Some(sample) => {
            let t = TsneConfig::default();
            Some(EmbedSettings {
                sample,
                tsne: TsneConfig {
                    perplexity: cfg.pick(a.perplexity, "perplexity", t.perplexity)?,
                    iterations: cfg.pick(a.iters, "iters", t.iterations)?,
                    ..t
                },
            })
        }
    };
    let spec = ExperimentSpec {
        manifest,
        train,
        modes,
        n_seeds: cfg.pick(a.seeds, "seeds", 3)?,
        out_dir: cfg.require(a.out_dir, "out-dir")?,
        embed,
    };
    let outcome = pipeline::run_experiment(&spec, &mut |msg| eprintln!("{msg}"))?;
    print!("{}", outcome.table.to_csv());
    for v in &outcome.verdicts {
        println!("{}", v.line());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 3,
        ErrorClass::Validation => 4,
        ErrorClass::Numeric => 5,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
