//! Command-line driver: `train`, `eval`, `diagnose` and `project-check`.

pub mod commands;
pub mod config;
pub mod kkt;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the root under which runs without `--out`
/// are written.
pub const OUT_ROOT_ENV: &str = "CST_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Mismatch(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] cst_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use cst_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Mismatch(_) => EXIT_IO,
            CliError::CheckFailed(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Parameter { .. } | E::Input(_) | E::Dimension { .. } => EXIT_CONFIG,
                E::NonFinite(_) => EXIT_NUMERIC,
                E::Load { .. } | E::Io(_) | E::Serde(_) => EXIT_IO,
                E::Contract(_) => EXIT_INTERNAL,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cst", version, about = "Channel-sparse training with variance-reduced structure gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `train.remain_ratio=0.3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$CST_OUT_ROOT/<config name>` or
    /// `runs/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, write metrics/checkpoints and report the selected subnetwork.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from a checkpoint up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Re-run final mask selection from a checkpoint.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the number of candidate masks.
        #[arg(long)]
        eval_samples: Option<usize>,
    },
    /// Estimator diagnostics on a fresh or checkpointed model.
    Diagnose {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare the structure projection against an exact reference.
    ProjectCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Maximum vector length; each trial draws a length in `1..=dim`.
        #[arg(long, default_value_t = 50)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed budget `K = ratio · n`; random per trial when omitted.
        #[arg(long)]
        budget_ratio: Option<f64>,
    },
}

/// Default output directory for a run name.
pub fn output_dir(out: Option<&Path>, run_name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(run_name),
    }
}

/// Runs a parsed command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train { args, resume } => commands::train(&args, resume.as_deref(), stdout),
        Command::Eval {
            args,
            checkpoint,
            eval_samples,
        } => commands::eval(&args, &checkpoint, eval_samples, stdout),
        Command::Diagnose { args, checkpoint } => commands::diagnose(&args, checkpoint.as_deref(), stdout),
        Command::ProjectCheck {
            trials,
            dim,
            seed,
            budget_ratio,
        } => commands::project_check(trials, dim, seed, budget_ratio, stdout),
    }
}
