//! The `wcaps` command line: training, evaluation, ablation sweeps, routing
//! inspection and gradient checks.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 configuration
//! error, 3 data error, 4 unreadable checkpoint.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use data::DataSource;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::CheckFailed(_) | Self::Runtime(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Checkpoint(_) => 4,
        }
    }
}

impl From<wcaps_core::Error> for CliError {
    fn from(e: wcaps_core::Error) -> Self {
        use wcaps_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidSpec(_) => Self::Config(msg),
            E::BadMagic { .. }
            | E::TruncatedFile(_)
            | E::CountMismatch(_)
            | E::InvalidData(_)
            | E::InvalidSizes(_)
            | E::DataUnavailable(_) => Self::Data(msg),
            E::CorruptCheckpoint(_) => Self::Checkpoint(msg),
            _ => Self::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "wcaps", version, about = "Wasserstein-routed capsule networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// The source's held-out test set.
    Test,
    /// The validation split recorded in the checkpoint's run config.
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write metrics.csv, best.wcap and config.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the `data` key.
        #[arg(long)]
        data: Option<String>,
        /// Overrides the `out` key.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the `seed` key and WCAPS_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and mean cosθ of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Train every variant under the same seeds and compare them.
    Ablate {
        /// Routing modes (ws+ce, ws, ce, random, uniform), weightings
        /// (softmax, normalized) or non-linearities (tilt, squash).
        #[arg(long = "variant", required = true, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<String>,
        /// Seeds shared by every variant; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Class-conditional mean routing weights per level.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Finite-difference gradient checks in 64-bit precision.
    Gradcheck {
        /// primitives, layers or micro-model; all three when omitted.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Breaks the relu backward rule to prove the checker catches it.
        #[arg(long, hide = true)]
        fault_relu: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
