use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptycho::cli::{cmd_evaluate, cmd_pipeline, cmd_reconstruct, cmd_simulate, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "ptycho",
    about = "Simulate and reconstruct ptychography experiments with stochastic ADMM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize measurements, scan set, ground truth, and probe files.
    Simulate(Common),
    /// Reconstruct object (and probe, in blind mode) from measurement files.
    Reconstruct(Common),
    /// Score a reconstruction against ground truth.
    Evaluate(Common),
    /// simulate, reconstruct, and evaluate in sequence.
    Pipeline(Common),
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        CliError::Config(format!(
            "cannot read config {}: {e}",
            common.config.display()
        ))
    })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(&load_config(c)?, &c.out, c.quiet),
        Command::Reconstruct(c) => cmd_reconstruct(&load_config(c)?, &c.out, c.quiet),
        Command::Evaluate(c) => cmd_evaluate(&load_config(c)?, &c.out, c.quiet),
        Command::Pipeline(c) => cmd_pipeline(&load_config(c)?, &c.out, c.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
