//! Command-line runner: dataset generation, training, evaluation and the
//! bundled comparison experiments.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numeric
//! error, 3 partial experiment failure.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::{split_assignment, RunConfig, SEED_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Library(#[from] smoothlearn::Error),
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Library(_) => 2,
            CliError::Partial(_) => 3,
        }
    }
}

macro_rules! library_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Library(e.into())
            }
        }
    )*};
}
library_error!(
    smoothlearn::learn::LearnError,
    smoothlearn::tasks::TaskError,
    smoothlearn::graph::GraphError
);

#[derive(Debug, Parser)]
#[command(
    name = "smoothlearn",
    version,
    about = "Factor-graph smoothers with learned noise models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (`out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; beats the config and the environment.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        records: Option<usize>,
        /// Render this many disk records to PNG frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on all folds but one.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        noise: Option<String>,
        /// Unrolled Gauss-Newton steps of the surrogate loss.
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Held-out fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Where to write the checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint per fold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// smoother, ekf, raw or gt.
        #[arg(long)]
        estimator: Option<String>,
        /// `all` or a comma-separated list of folds.
        #[arg(long)]
        folds: Option<String>,
    },
    /// Run a bundled comparison.
    Experiment {
        name: ExperimentName,
        #[command(flatten)]
        common: Common,
        /// Cells trained concurrently.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    DiskCompare,
    OdomCompare,
    NoiseTransfer,
}

impl ExperimentName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::DiskCompare => "disk-compare",
            ExperimentName::OdomCompare => "odom-compare",
            ExperimentName::NoiseTransfer => "noise-transfer",
        }
    }
}

fn resolve(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    for s in &common.set {
        overrides.push(split_assignment(s)?);
    }
    if let Some(out) = &common.out {
        overrides.push(("out".to_string(), out.display().to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(
        common.config.as_deref(),
        &overrides,
        env_seed.as_deref(),
        common.seed,
    )
}

fn text<T: ToString>(x: &Option<T>) -> Option<String> {
    x.as_ref().map(T::to_string)
}

fn path(x: &Option<PathBuf>) -> Option<String> {
    x.as_ref().map(|p| p.display().to_string())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            common,
            task,
            records,
            frames,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("task", task),
                    ("data.records", text(&records)),
                    ("data.frames", text(&frames)),
                ],
            )?;
            commands::cmd_gen(&cfg)
        }
        Command::Train {
            common,
            data,
            loss,
            noise,
            k,
            epochs,
            lr,
            fold,
            checkpoint,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("data.path", path(&data)),
                    ("train.loss", loss),
                    ("train.noise", noise),
                    ("train.K", text(&k)),
                    ("train.epochs", text(&epochs)),
                    ("train.lr", text(&lr)),
                    ("train.fold", text(&fold)),
                    ("train.checkpoint", path(&checkpoint)),
                ],
            )?;
            commands::cmd_train(&cfg)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            estimator,
            folds,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("data.path", path(&data)),
                    ("eval.checkpoint", path(&checkpoint)),
                    ("eval.estimator", estimator),
                    ("eval.folds", folds),
                ],
            )?;
            commands::cmd_eval(&cfg)
        }
        Command::Experiment { name, common, jobs } => {
            let cfg = resolve(&common, vec![("experiment.jobs", text(&jobs))])?;
            experiment::cmd_experiment(name, &cfg)
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
