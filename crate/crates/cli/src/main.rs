use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use error::CliError;

/// Distributionally robust Bayesian portfolio control: simulation, radius
/// calibration, backtests and experiment sweeps.
#[derive(Debug, Parser)]
#[command(name = "drbc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate price paths under a drift model.
    Simulate(Common),
    /// Build a prior from a price file and calibrate the radius.
    Calibrate(WithPrices),
    /// Run strategies on synthetic scenarios or a price file.
    Backtest(WithPrices),
    /// Run the multi-cell experiment grid and/or the radius-scale sweep.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct WithPrices {
    #[command(flatten)]
    common: Common,
    /// Price CSV: `time` or date column followed by one column per asset.
    #[arg(long)]
    prices: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, prices) = match &cli.command {
        Command::Simulate(c) | Command::Sweep(c) => (c, None),
        Command::Calibrate(p) | Command::Backtest(p) => (&p.common, p.prices.as_deref()),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let doc = config::read_document(&common.config)?;
    let cfg = config::resolve(doc, std::env::vars(), common.seed)?;
    log::info!("resolved config with seed {}", cfg.seed.unwrap_or(0));
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, &common.out),
        Command::Calibrate(_) => commands::calibrate(&cfg, prices, &common.out),
        Command::Backtest(_) => commands::backtest(&cfg, prices, &common.out),
        Command::Sweep(_) => commands::sweep(&cfg, &common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
