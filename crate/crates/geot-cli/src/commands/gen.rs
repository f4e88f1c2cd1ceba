//! Dataset generation: writes `labeled/`, `unlabeled/`, `test/`, and by
//! default `truth/` (clean-label originals of the unlabeled clouds, for
//! pseudo-label diagnostics) under one root, plus a `manifest.json`
//! recording the exact generation parameters. Reruns with the same flags
//! produce byte-identical files.
//!
//! Label noise corrupts annotations of the training split only; the
//! test and truth copies carry clean labels, so evaluation measures
//! recovery of the true classes rather than agreement with the noise.

use std::path::{Path, PathBuf};

use clap::Args;
use geot_core::cloudgen::{generate_arch, write_cloud, ArchSpec, PointCloud};
use geot_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

/// Manifest filename inside the dataset root.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset root directory
    #[arg(long)]
    pub out: PathBuf,
    /// Training clouds (labeled + unlabeled together)
    #[arg(long, default_value_t = 200)]
    pub clouds: usize,
    /// Points per cloud
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    /// Classes including background
    #[arg(long, default_value_t = 9)]
    pub classes: usize,
    /// Fraction of training clouds that keep their labels
    #[arg(long, default_value_t = 0.05)]
    pub labeled_ratio: f64,
    /// Held-out clean-label clouds written to test/
    #[arg(long, default_value_t = 20)]
    pub test_clouds: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Skip the truth/ copies of the unlabeled clouds
    #[arg(long)]
    pub no_truth: bool,
    /// Arch radius (defaults to the generator's)
    #[arg(long)]
    pub arch_radius: Option<f64>,
    /// Arc length between adjacent tooth centers
    #[arg(long)]
    pub tooth_spacing: Option<f64>,
    /// Per-axis standard deviation of each tooth cluster
    #[arg(long)]
    pub cluster_spread: Option<f64>,
    /// Probability of relabeling training-split boundary points to the
    /// adjacent tooth
    #[arg(long)]
    pub boundary_jitter: Option<f64>,
    /// Probability that a training-split tooth cluster shifts whole to an
    /// adjacent class
    #[arg(long)]
    pub tooth_mislabel: Option<f64>,
}

#[derive(Serialize)]
struct Manifest {
    clouds: usize,
    points: usize,
    classes: usize,
    labeled_ratio: f64,
    labeled_clouds: usize,
    unlabeled_clouds: usize,
    test_clouds: usize,
    seed: u64,
    truth: bool,
    arch_radius: f64,
    tooth_spacing: f64,
    cluster_spread: f64,
    boundary_jitter: f64,
    tooth_mislabel: f64,
}

fn write_into(cloud: &PointCloud, dir: &Path, index: usize) -> Result<()> {
    write_cloud(cloud, &dir.join(format!("cloud_{index:04}.geopc")))
}

pub fn run(args: &GenArgs) -> Result<()> {
    if args.clouds == 0 {
        return Err(Error::Config("need at least one training cloud".into()));
    }
    if args.test_clouds == 0 {
        return Err(Error::Config("need at least one test cloud".into()));
    }
    if !(0.0..=1.0).contains(&args.labeled_ratio) {
        return Err(Error::Config(format!(
            "labeled-ratio {} outside [0, 1]",
            args.labeled_ratio
        )));
    }
    let n_labeled = (args.clouds as f64 * args.labeled_ratio).round() as usize;
    let n_labeled = n_labeled.min(args.clouds);
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "labeled-ratio {} of {} clouds rounds to zero labeled clouds",
            args.labeled_ratio, args.clouds
        )));
    }
    let n_unlabeled = args.clouds - n_labeled;

    let defaults = ArchSpec::default();
    let base = ArchSpec {
        n_classes: args.classes,
        n_points: args.points,
        arch_radius: args.arch_radius.unwrap_or(defaults.arch_radius),
        tooth_spacing: args.tooth_spacing.unwrap_or(defaults.tooth_spacing),
        cluster_spread: args.cluster_spread.unwrap_or(defaults.cluster_spread),
        boundary_jitter: args.boundary_jitter.unwrap_or(defaults.boundary_jitter),
        tooth_mislabel: args.tooth_mislabel.unwrap_or(defaults.tooth_mislabel),
        seed: 0,
    };

    let labeled_dir = args.out.join("labeled");
    let unlabeled_dir = args.out.join("unlabeled");
    let test_dir = args.out.join("test");
    let truth_dir = args.out.join("truth");
    std::fs::create_dir_all(&labeled_dir)?;
    std::fs::create_dir_all(&unlabeled_dir)?;
    std::fs::create_dir_all(&test_dir)?;
    let write_truth = !args.no_truth && n_unlabeled > 0;
    if write_truth {
        std::fs::create_dir_all(&truth_dir)?;
    }

    // Cloud contents depend only on (seed, index), so changing the split
    // flags rearranges files without regenerating different geometry.
    // The label-noise pass draws randomness after the geometry, so the
    // jitter-free respec below yields the same coordinates with clean
    // labels.
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    for i in 0..args.clouds {
        let spec = ArchSpec {
            seed: rng.gen(),
            ..base.clone()
        };
        let cloud = generate_arch(&spec)?;
        if i < n_labeled {
            write_into(&cloud, &labeled_dir, i)?;
        } else {
            write_into(&cloud.without_labels(), &unlabeled_dir, i)?;
            if write_truth {
                let clean = generate_arch(&ArchSpec {
                    boundary_jitter: 0.0,
                    tooth_mislabel: 0.0,
                    ..spec.clone()
                })?;
                write_into(&clean, &truth_dir, i)?;
            }
        }
    }
    for j in 0..args.test_clouds {
        let spec = ArchSpec {
            seed: rng.gen(),
            boundary_jitter: 0.0,
            tooth_mislabel: 0.0,
            ..base.clone()
        };
        write_into(&generate_arch(&spec)?, &test_dir, args.clouds + j)?;
    }

    let manifest = Manifest {
        clouds: args.clouds,
        points: args.points,
        classes: args.classes,
        labeled_ratio: args.labeled_ratio,
        labeled_clouds: n_labeled,
        unlabeled_clouds: n_unlabeled,
        test_clouds: args.test_clouds,
        seed: args.seed,
        truth: write_truth,
        arch_radius: base.arch_radius,
        tooth_spacing: base.tooth_spacing,
        cluster_spread: base.cluster_spread,
        boundary_jitter: base.boundary_jitter,
        tooth_mislabel: base.tooth_mislabel,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(args.out.join(MANIFEST_FILE), text)?;

    println!(
        "wrote {} labeled, {} unlabeled, {} test clouds to {}",
        n_labeled,
        n_unlabeled,
        args.test_clouds,
        args.out.display()
    );
    Ok(())
}
