//! Evaluation: scores a checkpoint on every labeled cloud in a
//! directory, writing the pooled metrics to `metrics.json` and one entry
//! per cloud to `per_cloud.json`. With `--sample-points` the model
//! predicts on a deterministic subsample and the labels are extended
//! back to the full cloud by nearest-sample majority vote, mirroring how
//! a large scan would be segmented at a fixed point budget.

use std::path::{Path, PathBuf};

use clap::Args;
use geot_core::cloudgen::{read_cloud, PointCloud};
use geot_core::diffcore::ParamStore;
use geot_core::metrics::{
    knn_vote_upsample, ConfusionMatrix, MetricsReport, DEFAULT_VOTE_K,
};
use geot_core::trainer::Checkpoint;
use geot_core::{backbone, parallel, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

/// Aggregate metrics filename inside the output directory.
pub const METRICS_FILE: &str = "metrics.json";
/// Per-cloud metrics filename inside the output directory.
pub const PER_CLOUD_FILE: &str = "per_cloud.json";

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of labeled clouds to score
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the metrics files
    #[arg(long)]
    pub out: PathBuf,
    /// Predict on this many sampled points, then upsample by vote
    #[arg(long)]
    pub sample_points: Option<usize>,
    /// Neighbors in the upsampling vote
    #[arg(long, default_value_t = DEFAULT_VOTE_K)]
    pub vote_k: usize,
}

#[derive(Serialize)]
struct PerCloud {
    file: String,
    metrics: MetricsReport,
}

fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "geopc"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no .geopc clouds in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Predicts labels for one cloud, optionally through the sample-and-vote
/// path. Sampling is seeded by the cloud's position in the file list.
fn predict(
    store: &ParamStore,
    ckpt: &Checkpoint,
    cloud: &PointCloud,
    index: usize,
    sample_points: Option<usize>,
    vote_k: usize,
) -> Result<Vec<usize>> {
    let full = cloud.coords();
    match sample_points {
        Some(s) if s < cloud.n_points() => {
            let mut rng = ChaCha20Rng::seed_from_u64(index as u64);
            let mut picked =
                rand::seq::index::sample(&mut rng, cloud.n_points(), s).into_vec();
            picked.sort_unstable();
            let sample_coords: Vec<[f64; 3]> = picked.iter().map(|&i| full[i]).collect();
            let probs =
                backbone::seg_forward(store, &sample_coords, &ckpt.backbone, ckpt.n_classes)?;
            knn_vote_upsample(full, &sample_coords, &probs.argmax_labels(), vote_k)
        }
        _ => {
            let probs = backbone::seg_forward(store, full, &ckpt.backbone, ckpt.n_classes)?;
            Ok(probs.argmax_labels())
        }
    }
}

pub fn run(args: &EvalArgs) -> Result<()> {
    if let Some(s) = args.sample_points {
        if s == 0 {
            return Err(Error::Config("sample-points must be positive".into()));
        }
    }
    if args.vote_k == 0 {
        return Err(Error::Config("vote-k must be positive".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let files = cloud_files(&args.data)?;
    let clouds: Vec<PointCloud> = files
        .iter()
        .map(|p| read_cloud(p))
        .collect::<Result<_>>()?;
    for (path, cloud) in files.iter().zip(&clouds) {
        if cloud.labels().is_none() {
            return Err(Error::Config(format!(
                "{} has no labels to score against",
                path.display()
            )));
        }
        if cloud.n_classes() != ckpt.n_classes {
            return Err(Error::Config(format!(
                "{} has {} classes, checkpoint has {}",
                path.display(),
                cloud.n_classes(),
                ckpt.n_classes
            )));
        }
    }

    let per_cloud_confusion =
        parallel::map_indexed(clouds.len(), |i| -> Result<ConfusionMatrix> {
            let cloud = &clouds[i];
            let pred = predict(
                &ckpt.params,
                &ckpt,
                cloud,
                i,
                args.sample_points,
                args.vote_k,
            )?;
            ConfusionMatrix::from_labels(cloud.labels().unwrap(), &pred, ckpt.n_classes)
        });

    let mut pooled = ConfusionMatrix::new(ckpt.n_classes);
    let mut per_cloud = Vec::with_capacity(clouds.len());
    for (path, confusion) in files.iter().zip(per_cloud_confusion) {
        let confusion = confusion?;
        pooled.merge(&confusion)?;
        per_cloud.push(PerCloud {
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            metrics: MetricsReport::from_confusion(&confusion)?,
        });
    }
    let aggregate = MetricsReport::from_confusion(&pooled)?;

    std::fs::create_dir_all(&args.out)?;
    let aggregate_json = serde_json::to_string_pretty(&aggregate)?;
    std::fs::write(args.out.join(METRICS_FILE), format!("{aggregate_json}\n"))?;
    let per_cloud_json = serde_json::to_string_pretty(&per_cloud)?;
    std::fs::write(args.out.join(PER_CLOUD_FILE), format!("{per_cloud_json}\n"))?;
    println!("{}", serde_json::to_string(&aggregate)?);
    Ok(())
}
