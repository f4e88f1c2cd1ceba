//! Training: parses a config file, loads its dataset, and runs the
//! trainer, leaving `train_log.jsonl` and `checkpoint.bin` in the run
//! directory. `--resume` continues a previous run from its checkpoint.

use std::path::PathBuf;

use clap::Args;
use geot_core::trainer::{load_dataset, TrainConfig, Trainer, CHECKPOINT_FILE};
use geot_core::{Error, Result};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration file
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for the log and checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the run directory's checkpoint
    #[arg(long)]
    pub resume: bool,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::from_file(&args.config)?;
    let data = load_dataset(&cfg.data, cfg.classes)?;
    let mut trainer = if args.resume {
        let checkpoint = args.out.join(CHECKPOINT_FILE);
        if !checkpoint.exists() {
            return Err(Error::Config(format!(
                "--resume given but {} does not exist",
                checkpoint.display()
            )));
        }
        Trainer::resume(cfg, data, &checkpoint)?
    } else {
        Trainer::new(cfg, data)?
    };
    let records = trainer.run(&args.out)?;
    match records.last() {
        Some(last) => println!("{}", serde_json::to_string(last)?),
        None => println!(
            "nothing to do: {} epochs already trained",
            trainer.epochs_done()
        ),
    }
    Ok(())
}
