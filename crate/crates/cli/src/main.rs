//! `dcsam` command-line driver: data generation, training, evaluation, tube
//! propagation and the oracle suites.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O
//! error. `DCSAM_THREADS` caps the worker pool.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dcsam", version, about = "Dual-consistency prompt generation for few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic episode bundles for the first N classes.
    Gen {
        #[arg(long)]
        classes: u32,
        /// Episodes per class.
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the fold's training classes and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated components to switch off.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Ablate>,
    },
    /// Score a checkpoint on the fold's held-out classes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Score freshly initialised parameters instead of the trained ones.
        #[arg(long)]
        untrained: bool,
    },
    /// Propagate first-frame prompts through a synthetic mask tube.
    Tube {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode bundle directory (as written by `gen`).
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Motion::Full)]
        motion: Motion,
    },
    /// Run an oracle suite; exits non-zero on any failure.
    Oracle {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[allow(clippy::enum_variant_names)]
enum Ablate {
    NoCyc,
    NoNeg,
    NoSam,
    NoPrior,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Motion {
    Full,
    Translation,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Suite {
    Cyc,
    Softmax,
    Grad,
}

/// CLI failure classified by exit code.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] dcsam_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    OracleFailed(String),
    #[error("writing {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) | CliError::Usage(_) => 1,
            CliError::OracleFailed(_) => 2,
            CliError::Json { .. } => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("DCSAM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DCSAM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Gen { classes, seeds, out, size, seed } => commands::gen(classes, seeds, &out, (size[0], size[1]), seed),
        Command::Train { config, fold, out, ablate } => commands::train(&config, fold, &out, &ablate),
        Command::Eval { ckpt, fold, out, episodes, untrained } => commands::eval(&ckpt, fold, &out, episodes, untrained),
        Command::Tube { ckpt, episode, frames, out, seed, motion } => {
            commands::tube(&ckpt, &episode, frames, &out, seed, motion)
        }
        Command::Oracle { suite, trials, seed } => commands::oracle(suite, trials, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
