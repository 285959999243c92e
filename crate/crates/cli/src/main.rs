use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vin_cli::{evaluate_cmd, export_latent, forecast_cmd, generate, train, Context, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "vin", version, about = "Variational integrator network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and write the dataset of every seed.
    Generate(Common),
    /// Fit every configured model on every seed.
    Train(Common),
    /// Score trained models and summarize over seeds.
    Evaluate(Common),
    /// Roll trained models forward and write the predicted paths.
    Forecast(Common),
    /// Write per-frame latent coordinates of pixel models.
    ExportLatent(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs (model x seed) executed in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let (Command::Generate(a)
    | Command::Train(a)
    | Command::Evaluate(a)
    | Command::Forecast(a)
    | Command::ExportLatent(a)) = &cli.command;
    let ctx = Context::new(ExperimentConfig::load(&a.config)?, a.out.clone(), a.seed, a.workers);
    match cli.command {
        Command::Generate(_) => generate(&ctx),
        Command::Train(_) => train(&ctx),
        Command::Evaluate(_) => evaluate_cmd(&ctx),
        Command::Forecast(_) => forecast_cmd(&ctx),
        Command::ExportLatent(_) => export_latent(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
