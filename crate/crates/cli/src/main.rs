//! `randreg`: generate random pairs, pretrain, fine-tune, register and
//! evaluate from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "randreg", version, about = "Registration pretraining on random images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that reads a configuration.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write random training pairs or the synthetic downstream dataset.
    Gen(commands::GenArgs),
    /// Pretrain an encoder with lightweight decoders on random pairs.
    Pretrain(commands::TrainArgs),
    /// Fine-tune a backbone on the downstream dataset.
    Finetune(commands::FinetuneArgs),
    /// Register a moving image to a fixed image.
    Register(commands::RegisterArgs),
    /// Score a deformation with Dice, %NDV and optionally TRE.
    Eval(commands::EvalArgs),
    /// Plot loss and validation curves from their CSV files.
    Curves(commands::CurvesArgs),
    /// Run the built-in verification suites.
    Selftest(commands::SelftestArgs),
    /// Run one of the desk-scale experiments.
    Experiment(commands::ExperimentArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Register(a) => commands::register(a),
        Command::Eval(a) => commands::eval(a),
        Command::Curves(a) => commands::curves(a),
        Command::Selftest(a) => commands::selftest(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
