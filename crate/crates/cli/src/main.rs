//! Command-line entry points: train, eval, bench, ablate, params, synth.
//!
//! Configuration precedence is CLI flags > `--config` file > defaults.
//! Exit codes: 0 success, 2 unusable input or usage error, 3 training
//! divergence, 4 checkpoint CRC mismatch, 5 config/checkpoint shape
//! mismatch.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use wavemg_core::bench::{benchmark, BenchReport, REFERENCE_CONTEXT};
use wavemg_core::checkpoint::{self, Checkpoint, CheckpointError};
use wavemg_core::infer::{InferModel, Precision};
use wavemg_core::metrics::MetricsReport;
use wavemg_core::model::{param_count_formula, Model};
use wavemg_core::rng::SplitMix64;
use wavemg_core::runconfig::RunConfig;
use wavemg_core::signal::{
    load_csv, segment_all, split_windows, synth_gestures, write_recordings_csv,
    zscore_normalize, DatasetSplit, Recording, SynthConfig, Window,
};
use wavemg_core::tensor::Tensor;
use wavemg_core::train::{
    ablation_run, evaluate, history_to_csv, train, EpochStats, TrainError,
};

#[derive(Parser)]
#[command(name = "wavemg", version, about = "Wavelet-convolution transformer for sEMG gesture windows")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the best checkpoint plus a history CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Latency/throughput/memory benchmark of a checkpoint
    Bench(BenchArgs),
    /// Train the full model and both ablation variants, print a table
    Ablate(AblateArgs),
    /// Print the exact parameter count and per-module breakdown
    Params(ParamsArgs),
    /// Emit a synthetic gesture dataset as CSV
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the wavelet convolution module (identity feature map)
    #[arg(long)]
    no_waveletconv: bool,
    /// Replace rotary embeddings with the identity (positions ignored)
    #[arg(long)]
    no_rope: bool,
}

#[derive(Args)]
struct DataArgs {
    /// CSV dataset (header `subject,trial,label,ch0,...`)
    data: Option<PathBuf>,
    /// Use the built-in synthetic gesture generator instead of a file
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint output path; the history CSV lands next to it
    #[arg(long, default_value = "model.wfck")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Write the metrics CSV here (otherwise stdout only)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Int8,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "fp32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Concurrent measurement threads (reports are labeled; default 1)
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the report CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output CSV path
    #[arg(long, default_value = "synthetic.csv")]
    out: PathBuf,
}

/// Error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl From<wavemg_core::signal::SignalError> for CliError {
    fn from(e: wavemg_core::signal::SignalError) -> Self {
        CliError::new(2, format!("data error: {e}"))
    }
}

impl From<wavemg_core::runconfig::ConfigError> for CliError {
    fn from(e: wavemg_core::runconfig::ConfigError) -> Self {
        CliError::new(2, format!("configuration error: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::new(3, e.to_string()),
            other => CliError::new(2, other.to_string()),
        }
    }
}

impl From<wavemg_core::tensor::TensorError> for CliError {
    fn from(e: wavemg_core::tensor::TensorError) -> Self {
        CliError::new(2, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match &e {
            CheckpointError::CrcMismatch { .. } => 4,
            CheckpointError::ShapeMismatch { .. } => 5,
            _ => 2,
        };
        CliError::new(code, format!("checkpoint error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Params(args) => cmd_params(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// defaults -> config file -> CLI flags.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut run = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        run.apply_text(&text)?;
    }
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if args.no_waveletconv {
        run.model.use_waveletconv = false;
    }
    if args.no_rope {
        run.model.use_rope = false;
    }
    Ok(run)
}

/// Load and window a dataset. CSV channel counts override the configured
/// value (with a note); labels are validated against `num_classes`.
fn load_windows(
    run: &mut RunConfig,
    data: &DataArgs,
) -> Result<(Vec<Window>, DatasetSplit), CliError> {
    let recordings: Vec<Recording> = if data.synthetic {
        let synth = SynthConfig {
            num_classes: run.model.num_classes,
            channels: run.model.channels,
            per_class: run.per_class,
            window: run.model.window,
            seed: run.train.seed,
            snr_db: Some(run.snr_db),
        };
        synth_gestures(&synth)?
    } else {
        let path = data
            .data
            .as_ref()
            .ok_or_else(|| CliError::usage("provide a dataset path or --synthetic"))?;
        let recs = load_csv(path, Some(run.model.num_classes))?;
        let channels = recs[0].num_channels();
        if channels != run.model.channels {
            eprintln!(
                "note: dataset has {channels} channels; overriding configured {}",
                run.model.channels
            );
            run.model.channels = channels;
        }
        recs
    };
    let normalized: Result<Vec<Recording>, _> =
        recordings.iter().map(zscore_normalize).collect();
    let windows = segment_all(&normalized?, run.model.window, run.overlap)?;
    let split = split_windows(&windows, run.train.seed);
    Ok((windows, split))
}

fn report_line(report: &MetricsReport) -> String {
    format!(
        "accuracy {:.4} | macro-F1 {:.4} | AUROC {} | {} samples",
        report.accuracy,
        report.macro_f1,
        report.auroc_display(),
        report.samples
    )
}

fn print_confusion(report: &MetricsReport) {
    println!("confusion matrix (rows = true class):");
    for (c, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5}")).collect();
        println!("  {c:3} | {}", cells.join(" "));
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run = resolve_config(&args.config)?;
    let (windows, split) = load_windows(&mut run, &args.data)?;
    let (model, warnings) = Model::<f32>::init(run.model.clone(), run.train.seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "training on {} windows ({} train / {} val / {} test), {} parameters, seed {}",
        windows.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        model.param_count(),
        run.train.seed
    );

    let outcome = train(model, &windows, &split, &run.train)?;
    let mut history = outcome.history.clone();
    if !split.test.is_empty() {
        let (loss, report) = evaluate(&outcome.model, &windows, &split.test, run.train.batch)?;
        println!("test: {}", report_line(&report));
        history.push(EpochStats {
            epoch: outcome.best_epoch,
            split: "test".into(),
            loss,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            auroc: report.auroc,
        });
    }
    println!(
        "best epoch {} (val accuracy {:.4}){}",
        outcome.best_epoch,
        outcome.best_val_accuracy,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );

    let ckpt = checkpoint::model_to_checkpoint(&outcome.model, &run);
    ckpt.save(&args.out)?;
    let history_path = history_path_for(&args.out);
    std::fs::write(&history_path, history_to_csv(&history))
        .map_err(|e| CliError::usage(format!("cannot write history: {e}")))?;
    println!("checkpoint: {}", args.out.display());
    println!("history:    {}", history_path.display());
    Ok(())
}

fn history_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    name.push_str(".history.csv");
    checkpoint.with_file_name(name)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, run) = checkpoint::model_from_checkpoint(&ckpt)?;
    let mut run = run;
    let (windows, _) = load_windows(&mut run, &args.data)?;
    if run.model.channels != model.config.channels {
        return Err(CliError::new(
            5,
            format!(
                "dataset has {} channels but the checkpoint was trained with {}",
                run.model.channels, model.config.channels
            ),
        ));
    }
    let all: Vec<usize> = (0..windows.len()).collect();
    let (loss, report) = evaluate(&model, &windows, &all, run.train.batch)?;
    println!("{}", report_line(&report));
    print_confusion(&report);

    let mut csv = String::from("epoch,split,loss,acc,f1,auroc\n");
    csv.push_str(&format!(
        "0,eval,{},{},{},{}\n",
        loss,
        report.accuracy,
        report.macro_f1,
        report.auroc_display()
    ));
    match &args.out {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| CliError::usage(format!("cannot write metrics: {e}")))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, run) = checkpoint::model_from_checkpoint(&ckpt)?;
    // Benchmark input: seeded noise of the training window shape.
    let mut rng = SplitMix64::new(run.train.seed);
    let sample = Tensor::<f32>::from_fn(
        vec![args.batch.max(1), model.config.channels, model.config.window],
        |_| rng.next_normal() as f32,
    );

    let precisions: &[Precision] = match args.precision {
        PrecisionArg::Fp32 => &[Precision::Fp32],
        PrecisionArg::Int8 => &[Precision::Int8],
        PrecisionArg::Both => &[Precision::Fp32, Precision::Int8],
    };
    let mut rows = vec![BenchReport::csv_header().to_string()];
    for &precision in precisions {
        let engine = InferModel::from_model(&model, precision);
        let report = benchmark(&engine, &sample, args.iterations, args.warmup, args.threads);
        println!("{}", report.pretty());
        rows.push(report.csv_row());
    }
    println!("{REFERENCE_CONTEXT}");
    let csv = rows.join("\n") + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| CliError::usage(format!("cannot write report: {e}")))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut run = resolve_config(&args.config)?;
    let (windows, split) = load_windows(&mut run, &args.data)?;
    println!(
        "ablation on {} windows, seed {} (identical recipe per variant)",
        windows.len(),
        run.train.seed
    );
    let table = ablation_run::<f32>(&run.model, &run.train, &windows, &split)?;
    println!("{:<14} {:>8} {:>8} {:>8}", "variant", "acc", "f1", "auroc");
    for (name, report) in &table {
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8}",
            name,
            report.accuracy,
            report.macro_f1,
            report.auroc_display()
        );
    }
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<(), CliError> {
    let run = resolve_config(&args.config)?;
    let (model, warnings) = Model::<f32>::init(run.model.clone(), run.train.seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    for (module, count) in model.param_count_by_module() {
        println!("{module:<8} {count:>12}");
    }
    let total = model.param_count();
    println!("{:<8} {total:>12}", "total");
    assert_eq!(total, param_count_formula(&run.model), "closed form disagrees with registry");
    println!("reference figure for this architecture: 3.10M parameters; direct enumeration of the default configuration gives 4793094 (see README)");
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let run = resolve_config(&args.config)?;
    let synth = SynthConfig {
        num_classes: run.model.num_classes,
        channels: run.model.channels,
        per_class: run.per_class,
        window: run.model.window,
        seed: run.train.seed,
        snr_db: Some(run.snr_db),
    };
    let recs = synth_gestures(&synth)?;
    write_recordings_csv(&recs, &args.out)?;
    println!(
        "wrote {} recordings ({} classes x {} each, {} channels, {} samples) to {}",
        recs.len(),
        synth.num_classes,
        synth.per_class,
        synth.channels,
        synth.window,
        args.out.display()
    );
    Ok(())
}
