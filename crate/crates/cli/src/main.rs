//! `cycleflow`: data generation, the three training stages, evaluation and
//! reporting from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Failure classes and their stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 1.
    #[error("usage error: {0}")]
    Usage(String),
    /// Exit code 2.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 3.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Run(_) => 3,
        }
    }
}

impl From<cycleflow::Error> for CliError {
    fn from(e: cycleflow::Error) -> Self {
        use cycleflow::Error as E;
        match e {
            E::Config(_) | E::Argument(_) => CliError::Usage(e.to_string()),
            E::Training(_) | E::Sampling(_) | E::Distillation(_) => CliError::Run(e.to_string()),
            E::Segmentation(_)
            | E::Generation { .. }
            | E::Aggregation(_)
            | E::Format { .. }
            | E::Checkpoint(_)
            | E::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cycleflow",
    version,
    about = "Flow-matching policies for long-running manipulation"
)]
pub struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed (default: CYCLEFLOW_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration dataset with the scripted expert.
    Gen(GenArgs),
    /// Pretrain on play data or post-train on task data.
    Train(TrainArgs),
    /// Distill a teacher checkpoint into a few-step student.
    Distill(DistillArgs),
    /// Segment and downsample a dataset.
    Espada(EspadaArgs),
    /// Evaluate a checkpoint in the continuous or single-trial protocol.
    Eval(EvalArgs),
    /// Aggregate run logs into prp.csv and timeline.csv.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// play, noncyclic or cyclic.
    #[arg(long)]
    pub regime: String,
    /// Task name or id (required for noncyclic and cyclic data).
    #[arg(long)]
    pub task: Option<String>,
    /// Total recorded duration in seconds.
    #[arg(long, conflicts_with = "episodes")]
    pub seconds: Option<f64>,
    /// Number of episodes (noncyclic) or completed cycles (cyclic).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Posttrain,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Dataset files (.cfds).
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Checkpoint to start post-training from.
    #[arg(long, conflicts_with = "from_scratch")]
    pub init: Option<PathBuf>,
    /// Post-train a freshly initialized model.
    #[arg(long)]
    pub from_scratch: bool,
    /// Downsample the task data with this factor before windowing.
    #[arg(long)]
    pub espada: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Datasets whose observations seed the teacher rollouts.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EspadaArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Casual-phase downsampling factor.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Continuous,
    Single,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "continuous")]
    pub mode: EvalMode,
    /// Task name or id.
    #[arg(long, default_value = "pick-place")]
    pub task: String,
    /// Continuous-run duration in seconds.
    #[arg(long = "T")]
    pub duration: Option<f64>,
    /// Single-trial episode count.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of seeds, starting at the global seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub exec_horizon: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub cfg_rescale: Option<bool>,
    /// Sampler steps (default: teacher or student steps from the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Simulated seconds per sampler call (default: by model role).
    #[arg(long)]
    pub inference_cost: Option<f64>,
    /// Method label in the logs (default: derived from the checkpoint).
    #[arg(long)]
    pub method: Option<String>,
    /// Regime label in the logs (default: derived from the checkpoint).
    #[arg(long)]
    pub regime: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories searched recursively for run summaries.
    #[arg(long, required = true, num_args = 1..)]
    pub logs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cycleflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
