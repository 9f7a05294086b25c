mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use akhcrnet_core::ErrorClass;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "akhcrnet", version, about = "Train and evaluate the AKHCRNet handwritten-character classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural glyph dataset.
    Synth(SynthArgs),
    /// Scan, filter and split a dataset, then train.
    Train(TrainArgs),
    /// Report per-class metrics on the validation split.
    Eval(EvalArgs),
    /// Rank classes for a single image.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 84)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Options shared by the commands that build a split from a dataset root.
#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset root holding one directory per class.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Saved index file; takes the place of scanning `--data`.
    #[arg(long, conflicts_with = "data")]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub blank_threshold: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub prefetch_depth: Option<usize>,
    /// `key = value` file; flags win over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoints, curves and the split index.
    #[arg(long)]
    pub out: PathBuf,
    /// Learning-rate phases, e.g. `5x0.001,3x0.0001,3x0.00004`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for report.csv and confusion.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Io => 3,
        ErrorClass::Format => 4,
        ErrorClass::Numeric => 5,
        ErrorClass::Data => 6,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
