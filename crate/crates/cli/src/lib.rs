//! `exitdpp` command line: check, solve, estimate, simulate, verify, cover.
//!
//! Exit codes: 0 success, 1 failed check or numerical error (CFL, failed
//! flags, hash mismatch), 2 malformed configuration.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "exitdpp", version, about = "Exit-time control problems: grid solver, Monte Carlo and DPP checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; changes runtime only, never results.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate the problem and estimate Lipschitz constants.
    Check,
    /// Solve the grid recursion and write the value grid.
    Solve,
    /// Monte Carlo estimate of J at the query point.
    Estimate,
    /// Export simulated paths as CSV.
    Simulate,
    /// Check the dynamic programming principle and policy stitching.
    Verify,
    /// Dump the half-open cover of the time-space region.
    Cover,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] exitdpp::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(exitdpp::Error::Config(_) | exitdpp::Error::Parse { .. }) => 2,
            _ => 1,
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| commands::dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
