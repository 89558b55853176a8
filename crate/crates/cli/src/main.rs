//! `mie-lab`: run, analyse, sweep, estimate and replay multilevel equilibrium experiments.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mie_core::MieError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_SWEEP: u8 = 5;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: EXIT_RUNTIME, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl From<MieError> for Failure {
    fn from(e: MieError) -> Self {
        let code = match e.root() {
            MieError::Usage(_) | MieError::InvalidGame(_) => EXIT_CONFIG,
            MieError::Log(_) | MieError::HashMismatch { .. } | MieError::InsufficientData(_) => EXIT_DATA,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mie-lab", version, about = "Multilevel interactive equilibrium experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output` or `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel work.
    #[arg(long, env = "MIE_LAB_JOBS")]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out a scenario and write the interaction log and scalar series.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Equilibrium and stability reports for a log's final state.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Parallel grid over scenario parameters.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Policy, belief and subspace estimates from a log.
    Estimate {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-simulate a log and report the first divergence.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Simulate { common }
        | Command::Analyze { common, .. }
        | Command::Sweep { common }
        | Command::Estimate { common, .. }
        | Command::Replay { common, .. } => common.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Failure::config("--jobs must be >= 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate { common } => commands::simulate(&common),
        Command::Analyze { log, common } => commands::analyze(&log, &common),
        Command::Sweep { common } => commands::sweep(&common),
        Command::Estimate { log, common } => commands::estimate(&log, &common),
        Command::Replay { log, common } => commands::replay(&log, &common),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
