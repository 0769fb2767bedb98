//! Command-line driver: run experiments from declarative configs, compare
//! finished runs, and re-derive diagnostics from stored metrics.

mod compare;
mod config;
mod diag;
mod errors;
mod io;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use errors::{CliError, CliResult};

/// Environment variable selecting the worker count for parallel client
/// training (default 1).
const WORKERS_ENV: &str = "FEDDLE_WORKERS";

#[derive(Parser)]
#[command(
    name = "feddle",
    about = "Deterministic federated-learning simulator for hybrid data regimes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per seed from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set rounds=50 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Comma-separated master seeds; defaults to the config's seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory for manifest, metrics and summaries.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Tabulate final accuracy across completed run directories.
    Compare {
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive analysis summaries from a run's stored metrics.
    Diag { dir: PathBuf },
}

fn workers_from_env() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(text) => {
            let workers: usize = text.trim().parse().map_err(|e| {
                CliError::Usage(format!("{WORKERS_ENV}={text:?} is not a worker count: {e}"))
            })?;
            Ok(workers.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            config,
            set,
            seeds,
            out,
        } => {
            let workers = workers_from_env()?;
            run::cmd_run(&config, &set, seeds.as_deref(), &out, workers)
        }
        Command::Compare { dirs, out } => compare::cmd_compare(&dirs, out.as_deref()),
        Command::Diag { dir } => diag::cmd_diag(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            err.exit_code()
        }
    }
}
