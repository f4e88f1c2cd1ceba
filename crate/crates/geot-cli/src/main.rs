//! `geot`: synthetic-arch segmentation experiments from the command line.
//!
//! Subcommands cover the full pipeline: `gen` writes a dataset, `train`
//! fits a model, `eval` scores a checkpoint, `gradcheck` compares every
//! analytic gradient against finite differences, and `ablate` runs the
//! component-switch table and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 a check ran and failed, 2 usage or
//! configuration error, 3 numerical failure. The environment variable
//! `GEOT_THREADS` caps internal parallelism; `GEOT_THREADS=0` forces the
//! sequential reference mode whose logs are byte-reproducible.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geot_core::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "geot", version, about = "Synthetic-arch point-cloud segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic arch dataset
    Gen(commands::gen::GenArgs),
    /// Train a model from a config file
    Train(commands::train::TrainArgs),
    /// Score a checkpoint on a directory of labeled clouds
    Eval(commands::eval::EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Run the component-switch table or a hyperparameter sweep
    Ablate(commands::ablate::AblateArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = geot_core::parallel::install_thread_limit() {
        eprintln!("error: {err}");
        return ExitCode::from(EXIT_USAGE);
    }
    let outcome = match cli.command {
        Command::Gen(args) => commands::gen::run(&args).map(|()| true),
        Command::Train(args) => commands::train::run(&args).map(|()| true),
        Command::Eval(args) => commands::eval::run(&args).map(|()| true),
        Command::Gradcheck(args) => commands::gradcheck::run(&args),
        Command::Ablate(args) => commands::ablate::run(&args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
