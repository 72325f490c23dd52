//! Command-line front end: `generate`, `train`, `eval` and `predict`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::synth::{make_benchmark_sized, BENCHMARK_SIZES};
use crate::train::{evaluate, load_split, metrics_row, run_training, TrainConfig, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mhp", version, about = "Mamba Hawkes Process toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark as train/dev/test JSONL files.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, metrics and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Print the next-event distribution and time for a sequence prefix.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = BENCHMARK_SIZES[0])]
    pub train: usize,
    #[arg(long, default_value_t = BENCHMARK_SIZES[1])]
    pub dev: usize,
    #[arg(long, default_value_t = BENCHMARK_SIZES[2])]
    pub test: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with `TrainConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory of `train`; metrics are written here as `eval.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL file; the sequence is taken from line `--index`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Number of leading events to condition on (default: all).
    #[arg(long)]
    pub prefix: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, dev or test)")),
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericAbort { .. } => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn generate(args: &GenerateArgs, out: &mut impl Write) -> Result<()> {
    let bench = make_benchmark_sized(args.seed, [args.train, args.dev, args.test])?;
    fs::create_dir_all(&args.out).map_err(io_error(&args.out))?;
    for split in Split::ALL {
        let path = args.out.join(split.file_name());
        bench.split(split).save_jsonl(&path)?;
        let _ = writeln!(out, "wrote {} sequences to {}", bench.split(split).len(), path.display());
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(arch) = args.arch {
        cfg.arch = arch;
    }
    if let Some(data) = &args.data {
        cfg.data = data.clone();
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn train(args: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = train_config(args)?;
    if !cfg.data.is_dir() {
        return Err(Error::Io {
            path: cfg.data.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        });
    }
    let summary = run_training(&cfg)?;
    let _ = writeln!(
        out,
        "best epoch {} of {}: test ll/event {:.4} (Poisson {:.4}), accuracy {:.2}% (majority {:.2}%), rmse {:.4}",
        summary.best_epoch,
        summary.epochs_run,
        summary.test.ll_per_event,
        summary.poisson_test_ll_per_event,
        summary.test.accuracy,
        summary.majority_accuracy,
        summary.test.rmse
    );
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let ck = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint.json"));
    let model = checkpoint::load(&ck)?;
    let data = load_split(&args.data, args.split)?;
    let m = evaluate(&model, &data, model.quadrature())?;
    fs::create_dir_all(&args.out).map_err(io_error(&args.out))?;
    let path = args.out.join("eval.csv");
    let text = format!("{METRICS_HEADER}\n{}\n", metrics_row(0, args.split, &m));
    fs::write(&path, text).map_err(io_error(&path))?;
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    let _ = writeln!(out, "{json}");
    Ok(())
}

fn predict(args: &PredictArgs, out: &mut impl Write) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = Dataset::load_jsonl(&args.data)?;
    if data.num_types != model.config().num_types {
        return Err(Error::TypeCountMismatch {
            model: model.config().num_types,
            data: data.num_types,
        });
    }
    let seq = data.sequences.get(args.index).ok_or_else(|| {
        Error::Config(format!("--index {} but the file has {} sequences", args.index, data.len()))
    })?;
    let seq = seq.prefix(args.prefix.unwrap_or(seq.len()).max(1))?;
    let p = model.predict_next(&seq)?;
    let json = serde_json::json!({
        "prefix_len": seq.len(),
        "last_time": seq.times()[seq.len() - 1],
        "type_probs": p.probs,
        "predicted_type": p.argmax + 1,
        "predicted_time": p.time,
        "predicted_gap": p.gap,
    });
    let _ = writeln!(out, "{json:#}");
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Predict(a) => predict(a, out),
    }
}

/// Parses `args`, runs the command and returns the exit code. Messages go
/// to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{e}");
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
