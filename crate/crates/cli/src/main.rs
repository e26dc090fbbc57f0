// `!(x > 0.0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod datasets;
mod run_spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train and run PEPS image classifiers on IDX datasets.
#[derive(Parser, Debug)]
#[command(name = "peps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing metrics and best-validation checkpoints
    Train(Flags),
    /// Report accuracy and mean loss of a checkpoint on one split
    Eval(Flags),
    /// Print class probabilities for one image
    Predict(Flags),
    /// Print the shape and statistics of a checkpoint
    Inspect(Flags),
}

/// Flags shared by every command; each may also be given in the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// Flat `key = value` config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the four IDX files (optionally gzipped)
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for metrics and checkpoints
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (eval, predict, inspect) or write (train)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Virtual bond dimension D
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub chi: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// product or conv
    #[arg(long)]
    pub feature: Option<String>,
    /// on or off
    #[arg(long)]
    pub positivity: Option<String>,
    /// Stratified training subset size (validation and test default to 1/4 and 1/2 of it)
    #[arg(long)]
    pub subset: Option<String>,
    /// Validation samples held out of the training file
    #[arg(long)]
    pub val_count: Option<String>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub workers: Option<String>,
    /// Split used by eval and predict: train, val or test
    #[arg(long)]
    pub split: Option<String>,
    /// Sample index used by predict
    #[arg(long)]
    pub index: Option<String>,
    /// IDX image file used by predict instead of the dataset
    #[arg(long)]
    pub image: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(f) => run_spec::RunSpec::resolve(&f).and_then(|s| commands::train(&s)),
        Command::Eval(f) => run_spec::RunSpec::resolve(&f).and_then(|s| commands::eval(&s)),
        Command::Predict(f) => run_spec::RunSpec::resolve(&f).and_then(|s| commands::predict(&s)),
        Command::Inspect(f) => run_spec::RunSpec::resolve(&f).and_then(|s| commands::inspect(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
