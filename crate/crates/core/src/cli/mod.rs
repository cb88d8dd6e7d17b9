//! Command-line surface: `relmine gen|train|eval|ablate|report`.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! everything else.

mod commands;
mod config;
mod manifest;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use config::{apply_set, merge_json, resolve_config};
pub use manifest::RunManifest;
pub use report::{render_mr_curve, render_per_class_chart, render_summary, RunData};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Runtime(Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "relmine", version, about = "Relation-label mining for scene-graph predicate classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the planted synthetic benchmark.
    Gen(GenArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every row of a grid of config overrides.
    Ablate(AblateArgs),
    /// Render charts and a Markdown table from evaluation outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthetic benchmark config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config field, e.g. `--set annotator_bias=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base hyperparameters: `paper` or `desk`.
    #[arg(long, default_value = "paper")]
    pub profile: String,
    /// Directory written by `gen` (uses `train` for training and `test` for validation).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Resolve and print the config without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset base name inside the data directory.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the imputed and refined label of every held-out pair.
    #[arg(long)]
    pub dump_imputed: bool,
    /// Write one image's predicted scene graph as DOT.
    #[arg(long, value_name = "IMAGE_ID")]
    pub export_dot: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON array of config overrides; an optional `name` key labels a row.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value = "paper")]
    pub profile: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Applied to the base config before each row's overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Keep rows already completed in an existing ablation.csv.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding metrics.csv and per_class.csv (train_log.csv optional).
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> CliResult<()> {
    match command {
        Command::Gen(a) => commands::gen(&a, argv),
        Command::Train(a) => commands::train(&a, argv),
        Command::Eval(a) => commands::eval(&a, argv),
        Command::Ablate(a) => commands::ablate(&a, argv),
        Command::Report(a) => report::run(&a, argv),
    }
}
