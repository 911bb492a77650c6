use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use factorlab::cli::{cmd_backtest, cmd_gen_data, cmd_interpret, cmd_train, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "factorlab",
    about = "End-to-end differentiable factor investing: data, training, backtests, interpretation",
    version
)]
struct Cli {
    /// Structured TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    /// Fold-level parallelism for training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (factors/prices/sectors CSVs + manifest).
    GenData,
    /// Train the configured folds; emits checkpoints, logs, buffer dumps.
    Train,
    /// Evaluate a checkpoint and the configured baselines on its test fold.
    Backtest {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export attention heatmaps and monotonicity tables for a checkpoint.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out, cli.force),
        Command::Train => cmd_train(&cfg, &cli.out, cli.force, cli.jobs),
        Command::Backtest { checkpoint } => cmd_backtest(&cfg, checkpoint, &cli.out, cli.force),
        Command::Interpret { checkpoint } => cmd_interpret(&cfg, checkpoint, &cli.out, cli.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
