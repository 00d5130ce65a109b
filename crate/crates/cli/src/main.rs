use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedseg_cli::commands;
use fedseg_core::Error;

#[derive(Parser)]
#[command(name = "fedseg", version, about = "Federated one-shot segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic client volumes from a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the data directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a federated training session.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the run output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the federation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the dice reinforcement terms from the local objective.
        #[arg(long)]
        baseline: bool,
        /// Override the number of federated rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the per-round iteration cap.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Score a trained model on every client with the one-shot protocol.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated organ class ids, e.g. 1,2,3.
        #[arg(long, default_value = "1")]
        classes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of a volume or model file.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> fedseg_core::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = commands::load_config(&config, None, None, false, None, None)?;
            if let Some(out) = out {
                cfg.data_dir = out;
            }
            if let Some(seed) = seed {
                cfg.data_seed = Some(seed);
            }
            commands::cmd_generate(&cfg)
        }
        Command::Train {
            config,
            out,
            seed,
            baseline,
            rounds,
            cap,
        } => {
            let cfg = commands::load_config(&config, out, seed, baseline, rounds, cap)?;
            commands::cmd_train(&cfg)
        }
        Command::Evaluate {
            model,
            data,
            classes,
            out,
        } => {
            let ids = commands::parse_class_ids(&classes)?;
            commands::cmd_evaluate(&model, &data, &ids, &out)
        }
        Command::Inspect { path } => commands::cmd_inspect(&path),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Parse(_) | Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fedseg: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
