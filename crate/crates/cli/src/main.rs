//! `amplab`: command-line driver.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when the
//! numerics fail or a built-in check does not hold.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use crate::config::{parse_config, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] amplab_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "amplab", version, about = "Heat equation with a squared Gaussian potential: solvers, spectra and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize one lattice realization of the field.
    Synthesize(Common),
    /// Solve the PDE on a synthesized field for each coupling.
    Solve(Common),
    /// Monte Carlo path-integral estimates.
    Fk(Common),
    /// Path covariance spectrum and amplification product on the static path.
    Spectrum(Common),
    /// Critical coupling from the path optimizer.
    Gc(Common),
    /// Sup-norm law, tail constant, epsilon bounds and field-maximum check.
    Extremes(Common),
    /// Poisson-summation and series-agreement checks.
    PoissonCheck(Common),
    /// Intermittency scan over couplings.
    Scan(Common),
    /// Heavy-tailed i.i.d. sample means.
    IidDemo(Common),
    /// Every stage in sequence.
    All(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Couplings, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    g: Option<Vec<f64>>,
    /// Horizon.
    #[arg(long = "T", allow_negative_numbers = true)]
    t: Option<f64>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Synthesize(c) => ("synthesize", c),
            Command::Solve(c) => ("solve", c),
            Command::Fk(c) => ("fk", c),
            Command::Spectrum(c) => ("spectrum", c),
            Command::Gc(c) => ("gc", c),
            Command::Extremes(c) => ("extremes", c),
            Command::PoissonCheck(c) => ("poisson-check", c),
            Command::Scan(c) => ("scan", c),
            Command::IidDemo(c) => ("iid-demo", c),
            Command::All(c) => ("all", c),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("AMPLAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("AMPLAB_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    configure_threads()?;
    let (name, common) = cli.command.parts();
    let overrides = Overrides { seed: common.seed, out: common.out.clone(), g: common.g.clone(), duration: common.t };
    let cfg = parse_config(common.config.as_deref(), &overrides)?;
    eprintln!("amplab {name}: seed {} -> {}", cfg.seed, cfg.out.display());
    commands::Context::new(&cfg)?.run(name)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(failed) if failed.is_empty() => ExitCode::SUCCESS,
        Ok(failed) => {
            for f in failed {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
