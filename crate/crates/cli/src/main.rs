//! `crisk`: batch front end for competing-risks ATE curves and their bands.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

mod commands;
mod output;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use crisk_core::resampling::{Method, MultiplierKind};
use crisk_core::simulate::TruthKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "crisk", version, about = "g-formula treatment effects for competing risks")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "CRISK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the cause-specific Cox models and estimate the ATE curve.
    Fit(FitArgs),
    /// Resample the ATE process and build pointwise and simultaneous bands.
    Band(BandArgs),
    /// Generate a dataset and its true ATE curve from a scenario.
    Simulate(SimulateArgs),
    /// Monte-Carlo coverage of the bands under a scenario.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV with columns id, time, status, treatment and covariates.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub causes: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `default`, `uniform:M` or a comma-separated list of times.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Break tied times with seeded jitter instead of rejecting them.
    #[arg(long)]
    pub jitter_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct BandArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "wild")]
    pub method: Method,
    #[arg(long, default_value = "normal")]
    pub multiplier: MultiplierKind,
    #[arg(long = "B", default_value_t = 1000)]
    pub b: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scale the simultaneous band by the estimated standard deviation.
    #[arg(long)]
    pub stabilize: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid for the true curve: `uniform:M` or a comma-separated list.
    #[arg(long, default_value = "uniform:101")]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long = "B", default_value_t = 500)]
    pub b: usize,
    #[arg(long, default_value = "wild")]
    pub method: Method,
    #[arg(long, default_value = "normal")]
    pub multiplier: MultiplierKind,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub stabilize: bool,
    #[arg(long, value_enum, default_value = "population")]
    pub truth: TruthArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TruthArg {
    Population,
    Conditional,
}

impl From<TruthArg> for TruthKind {
    fn from(t: TruthArg) -> Self {
        match t {
            TruthArg::Population => TruthKind::Population,
            TruthArg::Conditional => TruthKind::Conditional,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        anyhow::ensure!(threads > 0, output::Usage("--threads must be at least 1".into()));
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match cli.command {
        Command::Fit(args) => commands::cmd_fit(&args),
        Command::Band(args) => commands::cmd_band(&args),
        Command::Simulate(args) => commands::cmd_simulate(&args),
        Command::Coverage(args) => commands::cmd_coverage(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(output::exit_code(&err))
        }
    }
}
