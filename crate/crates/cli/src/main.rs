//! Command-line pipeline for turbofan remaining-useful-life models:
//! `prepare` fits and caches preprocessing, `train` produces a checkpoint,
//! `evaluate` writes a metrics report, `gradcheck` verifies the autodiff
//! engine. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rul_core::cmapss::{load_bundle, train_rul_series, DatasetId};
use rul_core::dataset::{make_windows, write_cache, CacheMeta, WindowDataset, WINDOW_LEN};
use rul_core::eval::{build_report, final_predictions, report_to_json, DECISION_THRESHOLD};
use rul_core::gradcheck::{full_model_report, primitive_reports, GradCheckReport};
use rul_core::model::checkpoint::{self, digest_bytes};
use rul_core::model::ModelConfig;
use rul_core::prep::{PrepConfig, PreprocessModel};
use rul_core::train::{train, EpochStats, TrainConfig};

#[derive(Parser)]
#[command(
    name = "rul",
    version,
    about = "Uncertainty-aware remaining-useful-life pipeline for turbofan data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit preprocessing on a dataset and cache its training windows.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint plus an epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split and write a report.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck(GradcheckArgs),
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetId, String> {
    DatasetId::parse(s).map_err(|e| e.to_string())
}

/// Flags shared by the data-consuming commands.
#[derive(Args)]
struct DataArgs {
    /// Dataset identifier (FD001..FD004).
    #[arg(long, value_parser = parse_dataset)]
    dataset: DatasetId,
    /// Directory with the raw data files; defaults to $RUL_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root random seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSON config file overriding the built-in defaults
    /// ({"prep": .., "model": .., "train": ..}, all sections and fields
    /// optional); flags override the file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Override the epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the training batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Disable a pipeline stage (repeatable): dual-attention,
    /// condition-encoder, uncertainty-head, rul-weighting, denoising
    /// (a "no-" prefix is tolerated).
    #[arg(long)]
    ablate: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Maintenance-decision threshold, cycles.
    #[arg(long, default_value_t = DECISION_THRESHOLD)]
    threshold: f64,
    /// Inference batch size.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seed for inputs and coordinate sampling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Optional config file: any subset of the three sections, each section
/// any subset of its fields.
#[derive(Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    prep: Option<PrepConfig>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config file {}", path.display()))
}

fn resolve_data_dir(flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| std::env::var_os("RUL_DATA_DIR").map(PathBuf::from))
        .context("no --data-dir given and RUL_DATA_DIR is not set")
}

/// Write `content` under `out` as `{stem}-{digest12}.{ext}` and return the
/// path. The digest suffix keeps runs from silently overwriting each other.
fn write_artifact(out: &Path, stem: &str, ext: &str, content: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let digest = digest_bytes(content);
    let path = out.join(format!("{stem}-{}.{ext}", &digest[..12]));
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let data_dir = resolve_data_dir(&args.data.data_dir)?;
    let file_cfg = load_file_config(&args.data.config)?;
    let prep_cfg = file_cfg.prep.unwrap_or_default();
    let window_len = file_cfg.model.as_ref().map_or(WINDOW_LEN, |m| m.window_len);

    let bundle = load_bundle(args.data.dataset, &data_dir)?;
    let model = PreprocessModel::fit(&bundle.train, prep_cfg, args.data.seed)?;
    let json = model.to_json()?;
    let json_path =
        write_artifact(&args.data.out, &format!("preprocess-{}", bundle.id), "json", json.as_bytes())?;

    let cap = model.config.rul_cap;
    let mut windows = WindowDataset::new(window_len, model.feature_count());
    for traj in &bundle.train {
        let prepped = model.apply(traj)?;
        let labels = train_rul_series(traj.cycles, cap);
        windows.samples.extend(make_windows(&prepped, &labels, window_len)?);
    }
    let meta = CacheMeta {
        dataset: bundle.id.to_string(),
        split: "train".to_string(),
        prep_digest: digest_bytes(json.as_bytes()),
        window_len,
        feature_count: model.feature_count(),
        sample_count: windows.samples.len(),
    };
    fs::create_dir_all(&args.data.out)
        .with_context(|| format!("creating {}", args.data.out.display()))?;
    let cache_path = args
        .data
        .out
        .join(format!("windows-{}-train-{}.bin", bundle.id, &meta.prep_digest[..12]));
    write_cache(&cache_path, &windows, &meta)?;

    let names = model.selection.sensor_names();
    println!("dataset:          {}", bundle.id);
    println!("engines:          {}", bundle.train.len());
    println!("windows:          {}", windows.samples.len());
    println!("selected sensors: {} ({})", names.len(), names.join(", "));
    println!("condition clusters: {}", model.config.clusters);
    println!("preprocess model: {}", json_path.display());
    println!("window cache:     {}", cache_path.display());
    Ok(())
}

fn print_epoch(s: &EpochStats) {
    println!(
        "epoch {:>4}  loss {:>10.6}  val rmse {:>8.3}  lr {:.3e}  {:>6.1}s",
        s.epoch, s.train_loss, s.val_rmse, s.lr, s.seconds
    );
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data_dir = resolve_data_dir(&args.data.data_dir)?;
    let file_cfg = load_file_config(&args.data.config)?;
    let mut prep_cfg = file_cfg.prep.unwrap_or_default();
    let mut model_cfg = file_cfg.model.unwrap_or_default();
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    for name in &args.ablate {
        model_cfg.ablation.ablate(name)?;
    }
    if !model_cfg.ablation.denoising {
        prep_cfg.denoise = false;
    }
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(batch) = args.batch {
        train_cfg.batch_size = batch;
    }

    let bundle = load_bundle(args.data.dataset, &data_dir)?;
    println!(
        "training on {} ({} engines, seed {})",
        bundle.id,
        bundle.train.len(),
        args.data.seed
    );
    let result = train(&bundle, prep_cfg, model_cfg, &train_cfg, args.data.seed, print_epoch)?;

    let mut history = String::new();
    for stats in &result.history {
        history.push_str(&serde_json::to_string(stats).context("serializing history")?);
        history.push('\n');
    }
    let history_path = write_artifact(
        &args.data.out,
        &format!("history-{}", bundle.id),
        "jsonl",
        history.as_bytes(),
    )?;

    let tmp = args.data.out.join(format!("checkpoint-{}.partial", bundle.id));
    checkpoint::save(&tmp, &result.config, &result.preprocess, &result.meta, &result.params)?;
    let digest = checkpoint::digest(&tmp)?;
    let ckpt_path = args
        .data
        .out
        .join(format!("checkpoint-{}-{}.ckpt", bundle.id, &digest[..12]));
    fs::rename(&tmp, &ckpt_path)
        .with_context(|| format!("renaming checkpoint to {}", ckpt_path.display()))?;

    println!(
        "best val RMSE {:.3} cycles (epoch {} of {})",
        result.meta.best_val_rmse, result.meta.best_epoch, result.meta.epochs_run
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("history:    {}", history_path.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let data_dir = resolve_data_dir(&args.data.data_dir)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let digest = checkpoint::digest(&args.checkpoint)?;
    let bundle = load_bundle(args.data.dataset, &data_dir)?;
    let batch = args.batch.unwrap_or(256);

    let rows = final_predictions(
        &ckpt.header.config,
        &ckpt.params,
        &ckpt.header.preprocess,
        &bundle,
        batch,
    )?;
    let report = build_report(bundle.id.as_str(), &digest, &rows, args.threshold)?;
    let json = report_to_json(&report)?;
    let path = write_artifact(
        &args.data.out,
        &format!("report-{}", bundle.id),
        "json",
        json.as_bytes(),
    )?;

    let fmt_opt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.3}"),
        None => "n/a".to_string(),
    };
    println!("engines:            {}", report.engines.len());
    println!("RMSE:               {:.3} cycles", report.point.rmse);
    println!(
        "critical-zone RMSE: {} cycles ({} engines)",
        fmt_opt(report.zones.critical.rmse),
        report.zones.critical.count
    );
    let coverage95 = report
        .coverage
        .as_ref()
        .and_then(|c| c.levels.iter().find(|l| l.expected == 0.95))
        .map(|l| format!("{:.1}%", 100.0 * l.actual))
        .unwrap_or_else(|| "n/a".to_string());
    println!("95% coverage:       {coverage95}");
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if !(args.tol.is_finite() && args.tol > 0.0) {
        bail!("--tol must be a positive number, got {}", args.tol);
    }
    let print_line = |label: &str, r: &GradCheckReport| {
        println!(
            "{label:<24} max rel err {:>10.3e}  ({} coords, worst {})",
            r.max_rel_err, r.coords_checked, r.worst
        );
    };
    let mut worst: Option<(String, f64, String)> = None;
    let mut track = |label: &str, r: &GradCheckReport| {
        if worst.as_ref().is_none_or(|(_, e, _)| r.max_rel_err > *e) {
            worst = Some((label.to_string(), r.max_rel_err, r.worst.clone()));
        }
    };

    for (label, report) in primitive_reports(args.seed)? {
        print_line(&label, &report);
        track(&label, &report);
    }
    let full = full_model_report(args.seed)?;
    print_line("full model", &full);
    track("full model", &full);

    let (label, err, coord) = worst.expect("at least one check ran");
    if err < args.tol {
        println!("gradient checks passed: worst {err:.3e} ({label}) < tol {:.1e}", args.tol);
        Ok(())
    } else {
        bail!("gradient check failed: {label} at {coord} has rel err {err:.3e} >= tol {:.1e}", args.tol)
    }
}
