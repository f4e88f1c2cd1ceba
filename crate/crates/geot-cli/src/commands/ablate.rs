//! Component ablations and hyperparameter sweeps.
//!
//! The default mode trains the five switch configurations per seed on
//! the dataset named by the base config: no components, transition
//! matrices only, transitions with the graph regularizer, transitions
//! with the class prior, and everything together. `--sweep` instead
//! varies one hyperparameter on the everything-on configuration. Both
//! modes emit the same CSV shape (config, seed, miou, dsc, acc), one
//! row per run. Scores are test-split metrics averaged over the final
//! ten epochs, which damps epoch-to-epoch fluctuation of the endpoint.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use geot_core::trainer::{load_dataset, Dataset, TrainConfig, Trainer};
use geot_core::{Error, Result};

/// CSV filename inside the output directory.
pub const RESULTS_FILE: &str = "results.csv";

/// Epochs averaged into one reported score.
const SCORE_WINDOW: usize = 10;

/// The switch table: name, transitions on, graph regularizer on, class
/// prior on.
const SWITCH_TABLE: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, false, false),
    ("idtm", true, false, false),
    ("idtm_plgr", true, true, false),
    ("idtm_clgs", true, false, true),
    ("full", true, true, true),
];

const LAMBDA_SWEEP: [f64; 4] = [0.1, 0.5, 0.9, 0.99];
const BETA_SWEEP: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Prior fusion weight on the everything-on configuration
    Lambda,
    /// Regularizer weight on the everything-on configuration
    Beta,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base training config; each row overrides its switches or the
    /// swept value
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated run seeds
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Output directory for results.csv and the per-run directories
    #[arg(long)]
    pub out: PathBuf,
    /// Sweep a hyperparameter instead of the switch table
    #[arg(long, value_enum)]
    pub sweep: Option<SweepKind>,
}

struct Row {
    config: String,
    seed: u64,
    miou: f64,
    dsc: f64,
    acc: f64,
}

fn run_one(
    base: &TrainConfig,
    data: &Dataset,
    label: &str,
    seed: u64,
    mutate: impl FnOnce(&mut TrainConfig),
    out: &PathBuf,
) -> Result<Row> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    mutate(&mut cfg);
    let started = Instant::now();
    let run_dir = out.join(format!("{label}_s{seed}"));
    let mut trainer = Trainer::new(cfg, data.clone())?;
    let records = trainer.run(&run_dir)?;
    if records.is_empty() {
        return Err(Error::Config("ablation config trains zero epochs".into()));
    }
    let tail = &records[records.len().saturating_sub(SCORE_WINDOW)..];
    let n = tail.len() as f64;
    let miou = tail.iter().map(|r| r.miou).sum::<f64>() / n;
    let dsc = tail.iter().map(|r| r.dsc).sum::<f64>() / n;
    let acc = tail.iter().map(|r| r.acc).sum::<f64>() / n;
    eprintln!(
        "run {label} seed {seed}: miou {miou:.4} dsc {dsc:.4} acc {acc:.4} ({:.1} s)",
        started.elapsed().as_secs_f64()
    );
    Ok(Row {
        config: label.to_string(),
        seed,
        miou,
        dsc,
        acc,
    })
}

fn all_on(cfg: &mut TrainConfig) {
    cfg.use_idtm = true;
    cfg.use_plgr = true;
    cfg.use_clgs = true;
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let base = TrainConfig::from_file(&args.config)?;
    let data = load_dataset(&base.data, base.classes)?;
    std::fs::create_dir_all(&args.out)?;

    let mut rows: Vec<Row> = Vec::new();
    match args.sweep {
        None => {
            for (name, idtm, plgr, clgs) in SWITCH_TABLE {
                for &seed in &args.seeds {
                    rows.push(run_one(
                        &base,
                        &data,
                        name,
                        seed,
                        |cfg| {
                            cfg.use_idtm = idtm;
                            cfg.use_plgr = plgr;
                            cfg.use_clgs = clgs;
                        },
                        &args.out,
                    )?);
                }
            }
        }
        Some(SweepKind::Lambda) => {
            for v in LAMBDA_SWEEP {
                for &seed in &args.seeds {
                    rows.push(run_one(
                        &base,
                        &data,
                        &format!("lambda_{v}"),
                        seed,
                        |cfg| {
                            all_on(cfg);
                            cfg.lambda = v;
                        },
                        &args.out,
                    )?);
                }
            }
        }
        Some(SweepKind::Beta) => {
            for v in BETA_SWEEP {
                for &seed in &args.seeds {
                    rows.push(run_one(
                        &base,
                        &data,
                        &format!("beta_{v}"),
                        seed,
                        |cfg| {
                            all_on(cfg);
                            cfg.beta = v;
                        },
                        &args.out,
                    )?);
                }
            }
        }
    }

    let mut csv = String::from("config,seed,miou,dsc,acc\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.config, r.seed, r.miou, r.dsc, r.acc)
            .expect("writing to a string cannot fail");
    }
    std::fs::write(args.out.join(RESULTS_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}
