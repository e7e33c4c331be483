//! Command-line driver: dataset generation, training, evaluation,
//! calibration and the verification suites.

pub mod check;
mod commands;
mod config;

pub use check::{run_suite, Suite, SuiteReport};
pub use commands::{
    cmd_calibrate, cmd_check, cmd_eval, cmd_gen_data, cmd_train, EvalSource, Manifest, ManifestEntry,
};
pub use config::{CalibrationConfig, EvalConfig, RunConfig};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::enemyroom::EnemyRoomError;
use crate::gradients::GradientError;
use crate::inference::InferenceError;
use crate::neural::NeuralError;
use crate::symbolic::SymbolicError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    EnemyRoom(#[from] EnemyRoomError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for failed checks and numerical failures, 2 for IO and config
    /// problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::EnemyRoom(EnemyRoomError::NonFinite { .. }) => 1,
            CliError::EnemyRoom(EnemyRoomError::Io { .. } | EnemyRoomError::Json { .. } | EnemyRoomError::Config(_)) => 2,
            CliError::Neural(NeuralError::Io(_) | NeuralError::Json(_) | NeuralError::Format(_)) => 2,
            CliError::Config(_) | CliError::Io { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nesymm", version, about = "Differentiable particle filtering for neurosymbolic Markov models")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset: JSON Lines plus a `.meta.json` sidecar.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of trajectories (overrides `count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset; writes checkpoint.json, history.csv and run.log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; the training data is used when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset or on every dataset of a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameters to evaluate; a fresh initialisation when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Run a verification suite; exit code 1 when it fails.
    Check {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bisect the hit probability against a target death rate.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Calibration log (JSON).
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A pool that is already built (tests running several commands in
        // one process) is kept; results do not depend on its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one parsed invocation and returns the text to print on stdout.
pub fn run(cli: Cli) -> Result<String> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::GenData { common, out, count } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.world.seed = s;
            }
            if let Some(c) = count {
                cfg.count = c;
            }
            cmd_gen_data(&cfg, &out)
        }
        Command::Train {
            common,
            data,
            val,
            out,
            particles,
        } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(p) = particles {
                cfg.train.n_particles = p;
                cfg.train.val_particles = p;
            }
            cmd_train(&cfg, &data, val.as_deref(), &out)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            manifest,
            out,
            particles,
        } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(p) = particles {
                cfg.eval.n_particles = p;
            }
            let source = match (data, manifest) {
                (Some(d), _) => EvalSource::Data(d),
                (None, Some(m)) => EvalSource::Manifest(m),
                (None, None) => return Err(CliError::Config("--data or --manifest is required".into())),
            };
            cmd_eval(&cfg, checkpoint.as_deref(), &source, &out)
        }
        Command::Check { suite, seed } => cmd_check(suite, seed),
        Command::Calibrate { common, out } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.world.seed = s;
            }
            cmd_calibrate(&cfg, &out)
        }
    }
}
