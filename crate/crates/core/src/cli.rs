//! Command-line front end. The `pmffnn` binary is a thin wrapper over [`main_with_args`].
//!
//! Exit codes: `0` success, `2` config or usage error, `3` data or model-file
//! error, `4` training diverged, `1` anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{self, DataFingerprint, DatasetTable, StandardizeStats, SynthParams, Targets};
use crate::error::{DataError, Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{count_config_parameters, ArchConfig, ModelGraph, ModelKind, Task};
use crate::model_file;
use crate::training::{self, argmax_rows, FitReport, Loss, OptimizerConfig, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Domain { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::ModelFormat(_) | Error::Shape { .. } => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::State(_) => 1,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pmffnn",
    version,
    about = "Parallel multi-path feed-forward networks for wide tabular data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.bin + manifest.json.
    Train(TrainArgs),
    /// Evaluate a saved model.
    Eval(EvalArgs),
    /// Print the parameter breakdown of an architecture config.
    Describe(DescribeArgs),
    /// Write a synthetic blockwise dataset as CSV.
    Synth(SynthArgs),
    /// Train PMFFNN, Deep FFNN and 1D CNN under one training config and tabulate test metrics.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Target column of --data.
    #[arg(long, default_value = "label")]
    pub target: String,
    /// Synthetic data, e.g. `groups=4,features=64,rows=2000,classes=4[,noise=0.1][,seed=7]`.
    #[arg(long)]
    pub synth: Option<String>,
    /// Fraction of rows held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adam)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Cap on concurrently executing pathways (1 = sequential).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed used for the synthetic data and the train/test split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DescribeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Print the breakdown as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub features: usize,
    #[arg(long)]
    pub groups: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// PMFFNN config; the baselines reuse it with `kind` swapped.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Also write the three reports as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub const DEFAULT_NOISE: f64 = 0.1;

/// Parses `key=value` pairs of a `--synth` spec. `seed` defaults to `default_seed`.
pub fn parse_synth_spec(spec: &str, default_seed: u64) -> Result<SynthParams> {
    let mut p = SynthParams {
        n_rows: 0,
        n_features: 0,
        n_groups: 0,
        n_classes: 0,
        noise_std: DEFAULT_NOISE,
        seed: default_seed,
    };
    let mut seen = [false; 4];
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config("--synth", format!("expected key=value, got `{part}`")))?;
        let path = format!("--synth.{key}");
        let int = |v: &str| v.parse::<usize>().map_err(|e| Error::config(&path, e.to_string()));
        match key {
            "rows" => (p.n_rows, seen[0]) = (int(value)?, true),
            "features" => (p.n_features, seen[1]) = (int(value)?, true),
            "groups" => (p.n_groups, seen[2]) = (int(value)?, true),
            "classes" => (p.n_classes, seen[3]) = (int(value)?, true),
            "noise" => {
                p.noise_std = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| Error::config(&path, e.to_string()))?
            }
            "seed" => {
                p.seed = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| Error::config(&path, e.to_string()))?
            }
            _ => return Err(Error::config(path, "unknown key")),
        }
    }
    for (ok, key) in seen.iter().zip(["rows", "features", "groups", "classes"]) {
        if !ok {
            return Err(Error::config(format!("--synth.{key}"), "missing"));
        }
    }
    Ok(p)
}

fn read_config(path: &Path) -> Result<ArchConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    ArchConfig::from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub source: String,
    pub test_fraction: f64,
    pub train: DataFingerprint,
    pub test: DataFingerprint,
}

/// Everything needed to audit or reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: ArchConfig,
    pub train_config: TrainConfig,
    pub data: DataSection,
    pub trainable_parameters: usize,
    pub fit: FitReport,
    pub train_metrics: MetricsReport,
    pub test_metrics: MetricsReport,
}

struct Prepared {
    source: String,
    train: DatasetTable,
    test: DatasetTable,
    stats: StandardizeStats,
}

fn load_table(args: &DataArgs, task: Task, seed: u64) -> Result<(String, DatasetTable)> {
    match (&args.data, &args.synth) {
        (Some(path), None) => Ok((path.display().to_string(), data::load_csv(path, &args.target, task)?)),
        (None, Some(spec)) => {
            if task != Task::Classification {
                return Err(Error::config("task", "synthetic data is classification only"));
            }
            let params = parse_synth_spec(spec, seed)?;
            Ok((format!("synth:{spec}"), data::synth_blockwise(&params)?))
        }
        _ => Err(Error::config("--data", "exactly one of --data or --synth is required")),
    }
}

/// Loads, splits and standardizes (with train-split statistics).
fn prepare(args: &DataArgs, cfg: &ArchConfig, seed: u64) -> Result<Prepared> {
    let (source, table) = load_table(args, cfg.task, seed)?;
    check_data_fits(cfg, &table)?;
    let (train, test) = data::train_test_split(&table, args.test_fraction, seed)?;
    let (train, test, stats) = data::standardize(&train, &test)?;
    Ok(Prepared {
        source,
        train,
        test,
        stats,
    })
}

fn check_data_fits(cfg: &ArchConfig, table: &DatasetTable) -> Result<()> {
    if table.n_features() != cfg.n_features {
        return Err(DataError::Incompatible(format!(
            "model expects {} features, data has {}",
            cfg.n_features,
            table.n_features()
        ))
        .into());
    }
    match &table.targets {
        Targets::Classes { n_classes, .. } if *n_classes > cfg.n_outputs => Err(DataError::Incompatible(format!(
            "data has {n_classes} classes, model has {} outputs",
            cfg.n_outputs
        ))
        .into()),
        Targets::Values(y) if y.cols() != cfg.n_outputs => Err(DataError::Incompatible(format!(
            "data has {} target columns, model has {} outputs",
            y.cols(),
            cfg.n_outputs
        ))
        .into()),
        _ => Ok(()),
    }
}

fn train_config(args: &FitArgs, seed: u64, task: Task) -> TrainConfig {
    TrainConfig {
        optimizer: match args.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(args.lr),
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: args.lr,
                momentum: args.momentum,
            },
        },
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed,
        shuffle: !args.no_shuffle,
        loss: Loss::for_task(task),
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Inference-mode metrics of `model` on `table`.
pub fn evaluate_metrics(model: &mut ModelGraph, table: &DatasetTable) -> Result<MetricsReport> {
    let out = model.predict(&table.features)?;
    match &table.targets {
        Targets::Classes { labels, .. } => {
            let cm = metrics::confusion(labels, &argmax_rows(&out), model.n_outputs())?;
            metrics::classification_metrics(&cm)
        }
        Targets::Values(y) => metrics::regression_metrics(&out, y),
    }
}

fn print_epoch(e: &training::EpochRecord, epochs: usize, task: Task) {
    let metric = match task {
        Task::Classification => "acc",
        Task::Regression => "rmse",
    };
    let mut line = format!(
        "epoch {:>3}/{epochs}  loss {:.6}  train_{metric} {:.4}",
        e.epoch, e.train_loss, e.train_metric
    );
    if let (Some(l), Some(m)) = (e.val_loss, e.val_metric) {
        line.push_str(&format!("  test_loss {l:.6}  test_{metric} {m:.4}"));
    }
    line.push_str(&format!("  ({:.2}s)", e.seconds));
    println!("{line}");
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let cfg = read_config(&args.config)?;
    let prepared = prepare(&args.data, &cfg, args.seed)?;
    let tc = train_config(&args.fit, args.seed, cfg.task);
    let mut model = ModelGraph::build(&cfg, args.seed)?;
    model.set_threads(args.fit.threads.unwrap_or_else(default_threads))?;

    let report = training::fit(&mut model, &prepared.train, Some(&prepared.test), &tc)?;
    for e in &report.epochs {
        print_epoch(e, tc.epochs, cfg.task);
    }
    let train_metrics = evaluate_metrics(&mut model, &prepared.train)?;
    let test_metrics = evaluate_metrics(&mut model, &prepared.test)?;
    println!(
        "{}",
        metrics::render_table(&[("train", &train_metrics), ("test", &test_metrics)])
    );

    let manifest = RunManifest {
        seed: args.seed,
        config: cfg,
        train_config: tc,
        data: DataSection {
            source: prepared.source,
            test_fraction: args.data.test_fraction,
            train: prepared.train.fingerprint(),
            test: prepared.test.fingerprint(),
        },
        trainable_parameters: model.count_parameters().total,
        fit: report,
        train_metrics,
        test_metrics,
    };
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    model_file::save(args.out.join("model.bin"), &model, Some(&prepared.stats))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    model_file::write_atomic(&args.out.join("manifest.json"), json.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(manifest)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let saved = model_file::load(&args.model)?;
    let mut model = saved.model;
    let cfg = model.config().clone();
    model.set_threads(args.threads.unwrap_or_else(default_threads))?;
    let seed = match (args.seed, args.split) {
        (Some(s), _) => s,
        (None, Split::All) => 0,
        (None, _) => return Err(Error::config("--seed", "required to reproduce the train/test split")),
    };
    let (_, table) = load_table(&args.data, cfg.task, seed)?;
    check_data_fits(&cfg, &table)?;
    let table = match args.split {
        Split::All => table,
        Split::Train => data::train_test_split(&table, args.data.test_fraction, seed)?.0,
        Split::Test => data::train_test_split(&table, args.data.test_fraction, seed)?.1,
    };
    let table = match &saved.standardize {
        Some(stats) => table.with_features(stats.apply(&table.features)?),
        None => table,
    };
    let report = evaluate_metrics(&mut model, &table)?;
    println!("{}", metrics::render_table(&[(cfg.kind.display_name(), &report)]));
    if let Some(path) = &args.report {
        model_file::write_atomic(path, (report.to_json_pretty() + "\n").as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let counts = count_config_parameters(&cfg)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&counts).expect("breakdown serializes")
        );
        return Ok(());
    }
    println!(
        "{} over {} features -> {} outputs ({:?})",
        cfg.kind.display_name(),
        cfg.n_features,
        cfg.n_outputs,
        cfg.task
    );
    println!(
        "{:<10} {:>7} {:>12} {:>12}",
        "branch", "inputs", "params", "first-layer"
    );
    for b in &counts.branches {
        println!(
            "{:<10} {:>7} {:>12} {:>12}",
            b.name, b.input_dim, b.params, b.first_layer
        );
    }
    println!("{:<10} {:>7} {:>12}", "head", "", counts.head);
    println!(
        "{:<10} {:>7} {:>12} {:>12}",
        "total",
        "",
        counts.total,
        counts.first_layer_total()
    );
    println!(
        "width-matched monolithic FFNN (hidden {}): first layer {}, total {}",
        counts.monolithic_hidden, counts.monolithic_first_layer, counts.monolithic_total
    );
    println!(
        "first-layer ratio {} / {} = {:.4}",
        counts.first_layer_total(),
        counts.monolithic_first_layer,
        counts.reduction_ratio()
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let table = data::synth_blockwise(&SynthParams {
        n_rows: args.rows,
        n_features: args.features,
        n_groups: args.groups,
        n_classes: args.classes,
        noise_std: args.noise,
        seed: args.seed,
    })?;
    data::save_csv(&table, &args.out)?;
    println!(
        "wrote {} rows x {} features to {}",
        table.n_rows(),
        table.n_features(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<(ModelKind, MetricsReport)>> {
    let base = read_config(&args.config)?;
    let prepared = prepare(&args.data, &base, args.seed)?;
    let tc = train_config(&args.fit, args.seed, base.task);
    let mut results = Vec::new();
    for kind in [ModelKind::Pmffnn, ModelKind::DeepFfnn, ModelKind::Cnn1d] {
        let cfg = base.with_kind(kind);
        let mut model = ModelGraph::build(&cfg, args.seed)?;
        model.set_threads(args.fit.threads.unwrap_or_else(default_threads))?;
        let report = training::fit(&mut model, &prepared.train, None, &tc)?;
        let last = report.last().expect("at least one epoch");
        println!(
            "{:<10} params {:>8}  final loss {:.6}",
            kind.display_name(),
            model.count_parameters().total,
            last.train_loss
        );
        results.push((kind, evaluate_metrics(&mut model, &prepared.test)?));
    }
    let columns: Vec<(&str, &MetricsReport)> = results.iter().map(|(k, r)| (k.display_name(), r)).collect();
    println!("{}", metrics::render_table(&columns));
    if let Some(path) = &args.report {
        let map: std::collections::BTreeMap<&str, &MetricsReport> = columns.into_iter().collect();
        let json = serde_json::to_string_pretty(&map).expect("reports serialize") + "\n";
        model_file::write_atomic(path, json.as_bytes())?;
    }
    Ok(results)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Describe(a) => cmd_describe(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Compare(a) => cmd_compare(a).map(drop),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
