//! The semi-supervised training loop.
//!
//! Each step weak-augments a labeled batch for the supervised loss and
//! both weak- and strong-augments an unlabeled batch: the weak branch
//! yields argmax pseudo-labels (plain integers, so no gradient can reach
//! them), the strong branch is scored against those labels after its
//! predictions pass through the estimated transition matrices, optionally
//! fused with the class prior. Affinity graphs for the geometric
//! regularizer are built on the original unaugmented coordinates under
//! the current pseudo-labels. All three terms share one tape, one
//! backward pass, and one optimizer update.
//!
//! Determinism: epoch `e` draws every shuffle and augmentation seed from
//! a ChaCha stream `e + 1` of the run seed, so epoch randomness is
//! independent of where a resumed process picks up. Checkpoints carry
//! the optimizer moments and completed-epoch count next to the weights,
//! which makes resume bit-exact with an uninterrupted run.
//!
//! Batch aggregation follows the configured [`Aggregation`]: cloud means
//! are pooled by point count (default) or left as literal sums, and the
//! graph edge sums are divided by the batch's unlabeled point count in
//! mean mode.

mod config;
mod dataset;

pub use config::TrainConfig;
pub use dataset::{load_dataset, Dataset};

use std::cell::Cell;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::clgs::{class_prior_t, fuse_t, init_clgs_params};
use crate::cloudgen::{augment_strong, augment_weak, PointCloud};
use crate::diffcore::{forward_backward, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::objective::{
    corrected_focal_loss_t, focal_loss_t, Aggregation, LossBreakdown,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel;
use crate::plgr::{build_graphs, plgr_loss_t, AffinityGraph};
use crate::transition::{estimate_idtm_t, init_transition_params};
use crate::backbone;

/// Checkpoint filename inside the run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
/// Log filename inside the run directory.
pub const LOG_FILE: &str = "train_log.jsonl";

const META_EPOCH: &str = "meta.epoch";
const META_CLASSES: &str = "meta.classes";
const META_HIDDEN: &str = "meta.hidden";
const META_BLOCKS: &str = "meta.blocks";
const META_K_FEAT: &str = "meta.k_feat";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Step-averaged loss terms; `alpha` is the warm-up-effective value
    /// of the epoch's last step.
    pub loss: LossBreakdown,
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    /// Zero in sequential reference mode so logs stay byte-comparable.
    pub wall_s: f64,
    /// Pseudo-label agreement against ground truth, when the dataset
    /// carries a truth split.
    pub agreement: Option<f64>,
}

/// Model weights plus the run description needed to evaluate them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub backbone: BackboneConfig,
    pub n_classes: usize,
    pub epochs_done: usize,
}

fn read_meta(store: &ParamStore, key: &str) -> Result<usize> {
    let v = store.get(key)?.values()[0];
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Config(format!("checkpoint {key} {v} is not a count")));
    }
    Ok(v as usize)
}

impl Checkpoint {
    /// Loads the model part of a checkpoint, ignoring optimizer state.
    pub fn load(path: &Path) -> Result<Self> {
        let full = ParamStore::load(path)?;
        let mut params = ParamStore::new();
        for group in full.groups() {
            let name = group.name();
            if !name.starts_with("opt.") && !name.starts_with("meta.") {
                params.add_group(name.to_string(), group.values().to_vec())?;
            }
        }
        let n_classes = read_meta(&full, META_CLASSES)?;
        let backbone = BackboneConfig {
            hidden: read_meta(&full, META_HIDDEN)?,
            blocks: read_meta(&full, META_BLOCKS)?,
            k_feat: read_meta(&full, META_K_FEAT)?,
            seed: 0,
        };
        backbone.check_store(n_classes, &params)?;
        Ok(Checkpoint {
            params,
            backbone,
            n_classes,
            epochs_done: read_meta(&full, META_EPOCH)?,
        })
    }
}

/// Scores a parameter store on labeled clouds, pooling the confusion
/// counts over all of them.
pub fn evaluate_on_clouds(
    store: &ParamStore,
    bb: &BackboneConfig,
    n_classes: usize,
    clouds: &[PointCloud],
) -> Result<MetricsReport> {
    if clouds.is_empty() {
        return Err(Error::Config("no clouds to evaluate".into()));
    }
    let per_cloud = parallel::map_indexed(clouds.len(), |i| -> Result<ConfusionMatrix> {
        let cloud = &clouds[i];
        let gt = cloud
            .labels()
            .ok_or_else(|| Error::Shape(format!("evaluation cloud {i} has no labels")))?;
        let probs = backbone::seg_forward(store, cloud.coords(), bb, n_classes)?;
        ConfusionMatrix::from_labels(gt, &probs.argmax_labels(), n_classes)
    });
    let mut pooled = ConfusionMatrix::new(n_classes);
    for m in per_cloud {
        pooled.merge(&m?)?;
    }
    MetricsReport::from_confusion(&pooled)
}

/// One unlabeled cloud's views for a step.
struct UnlabeledView<'a> {
    original: &'a PointCloud,
    truth: Option<&'a PointCloud>,
    weak: PointCloud,
    strong: PointCloud,
}

struct StepOutcome {
    loss: LossBreakdown,
    pseudo_matches: u64,
    pseudo_total: u64,
}

struct EpochStats {
    loss: LossBreakdown,
    agreement: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    store: ParamStore,
    opt: AdamW,
    epochs_done: usize,
}

impl Trainer {
    /// Fresh run: initializes the backbone, transition estimator, and
    /// prior widths. All groups exist in every configuration so ablation
    /// switches never change the checkpoint layout.
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        cfg.backbone().init_params(cfg.classes, &mut store)?;
        init_transition_params(cfg.classes, &mut store)?;
        init_clgs_params(&mut store, cfg.classes)?;
        let opt = AdamW::new(Self::opt_config(&cfg), &store)?;
        Ok(Trainer {
            cfg,
            data,
            store,
            opt,
            epochs_done: 0,
        })
    }

    /// Continues a run from its checkpoint; the config must describe the
    /// same model.
    pub fn resume(cfg: TrainConfig, data: Dataset, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.n_classes != cfg.classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, config has {}",
                ckpt.n_classes, cfg.classes
            )));
        }
        let expected = cfg.backbone();
        if (ckpt.backbone.hidden, ckpt.backbone.blocks, ckpt.backbone.k_feat)
            != (expected.hidden, expected.blocks, expected.k_feat)
        {
            return Err(Error::Config(format!(
                "checkpoint backbone {:?} does not match config {:?}",
                ckpt.backbone, expected
            )));
        }
        let full = ParamStore::load(checkpoint)?;
        let mut opt = AdamW::new(Self::opt_config(&cfg), &ckpt.params)?;
        opt.import_state(&full)?;
        Ok(Trainer {
            cfg,
            data,
            store: ckpt.params,
            opt,
            epochs_done: ckpt.epochs_done,
        })
    }

    fn opt_config(cfg: &TrainConfig) -> AdamWConfig {
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_per_epoch(&self) -> usize {
        let bl = self.cfg.batch_labeled.min(self.data.labeled.len()).max(1);
        self.data.labeled.len().div_ceil(bl)
    }

    fn warmup_steps(&self) -> u64 {
        if !self.cfg.warmup {
            return 0;
        }
        let total = (self.cfg.epochs * self.steps_per_epoch()) as f64;
        (total * 0.1).ceil() as u64
    }

    fn alpha_at(&self, global_step: u64) -> f64 {
        let w = self.warmup_steps();
        if w == 0 || global_step >= w {
            self.cfg.alpha
        } else {
            self.cfg.alpha * global_step as f64 / w as f64
        }
    }

    /// Trains the remaining epochs, appending one log record per epoch
    /// and rewriting the checkpoint after each. Returns the new records.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<TrainLogRecord>> {
        std::fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join(LOG_FILE);
        let mut log = if self.epochs_done == 0 {
            std::fs::File::create(&log_path)?
        } else {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?
        };
        let mut records = Vec::new();
        for epoch_idx in self.epochs_done..self.cfg.epochs {
            let t0 = Instant::now();
            let stats = self.run_epoch(epoch_idx)?;
            let metrics = evaluate_on_clouds(
                &self.store,
                &self.cfg.backbone(),
                self.cfg.classes,
                &self.data.test,
            )?;
            let wall_s = if parallel::reference_mode() {
                0.0
            } else {
                t0.elapsed().as_secs_f64()
            };
            let record = TrainLogRecord {
                epoch: epoch_idx + 1,
                loss: stats.loss,
                miou: metrics.miou,
                dsc: metrics.dsc,
                acc: metrics.acc,
                wall_s,
                agreement: stats.agreement,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            log.flush()?;
            self.epochs_done = epoch_idx + 1;
            self.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
            records.push(record);
        }
        Ok(records)
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut full = self.store.clone();
        self.opt.export_state(&mut full)?;
        let bb = self.cfg.backbone();
        for (key, v) in [
            (META_EPOCH, self.epochs_done),
            (META_CLASSES, self.cfg.classes),
            (META_HIDDEN, bb.hidden),
            (META_BLOCKS, bb.blocks),
            (META_K_FEAT, bb.k_feat),
        ] {
            full.add_group(key, vec![v as f64])?;
        }
        let tmp = path.with_extension("bin.tmp");
        full.save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn run_epoch(&mut self, epoch_idx: usize) -> Result<EpochStats> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch_idx as u64 + 1);

        let n_l = self.data.labeled.len();
        let n_u = self.data.unlabeled.len();
        let bl = self.cfg.batch_labeled.min(n_l).max(1);
        let bu = self.cfg.batch_unlabeled.min(n_u);
        let mut labeled_order: Vec<usize> = (0..n_l).collect();
        labeled_order.shuffle(&mut rng);
        let mut unlabeled_order: Vec<usize> = (0..n_u).collect();
        unlabeled_order.shuffle(&mut rng);

        let steps = self.steps_per_epoch();
        let lr = self.cfg.lr_for_epoch(epoch_idx);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut points = (0usize, 0usize);
        let mut agree = (0u64, 0u64);
        let mut last_alpha = self.cfg.alpha;
        for step in 0..steps {
            let labeled_weak: Vec<PointCloud> = (0..bl)
                .map(|j| {
                    let idx = labeled_order[(step * bl + j) % n_l];
                    let seed = rng.gen::<u64>();
                    augment_weak(&self.data.labeled[idx], seed)
                })
                .collect();
            let unlabeled: Vec<UnlabeledView> = (0..bu)
                .map(|j| {
                    let idx = unlabeled_order[(step * bu + j) % n_u];
                    let weak_seed = rng.gen::<u64>();
                    let strong_seed = rng.gen::<u64>();
                    let original = &self.data.unlabeled[idx];
                    UnlabeledView {
                        original,
                        truth: self.data.truth.as_ref().map(|t| &t[idx]),
                        weak: augment_weak(original, weak_seed),
                        strong: augment_strong(original, strong_seed),
                    }
                })
                .collect();

            let global_step = (epoch_idx * steps + step) as u64;
            let alpha_eff = self.alpha_at(global_step);
            let outcome = run_step(
                &mut self.store,
                &self.cfg,
                &labeled_weak,
                &unlabeled,
                alpha_eff,
            )?;
            self.opt.step(&mut self.store, lr)?;
            self.store.reset_grads();

            sums.0 += outcome.loss.supervised;
            sums.1 += outcome.loss.unsupervised;
            sums.2 += outcome.loss.geometric;
            sums.3 += outcome.loss.total;
            points.0 += outcome.loss.labeled_points;
            points.1 += outcome.loss.unlabeled_points;
            agree.0 += outcome.pseudo_matches;
            agree.1 += outcome.pseudo_total;
            last_alpha = alpha_eff;
        }

        let n = steps as f64;
        Ok(EpochStats {
            loss: LossBreakdown {
                supervised: sums.0 / n,
                unsupervised: sums.1 / n,
                geometric: sums.2 / n,
                total: sums.3 / n,
                alpha: last_alpha,
                beta: self.cfg.beta,
                labeled_points: points.0,
                unlabeled_points: points.1,
            },
            agreement: (agree.1 > 0).then(|| agree.0 as f64 / agree.1 as f64),
        })
    }
}

/// Builds the step's composite loss on one tape, backpropagates, and
/// leaves the gradients accumulated in `store`.
fn run_step(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    labeled_weak: &[PointCloud],
    unlabeled: &[UnlabeledView],
    alpha_eff: f64,
) -> Result<StepOutcome> {
    if labeled_weak.is_empty() && unlabeled.is_empty() {
        return Err(Error::Config("a step needs at least one cloud".into()));
    }
    let bb = cfg.backbone();
    let c = cfg.classes;

    // Pseudo-labels come from a plain weak-branch forward: integers only,
    // so the unsupervised loss cannot backpropagate into their source.
    let mut pseudo: Vec<Vec<usize>> = Vec::with_capacity(unlabeled.len());
    let mut pseudo_matches = 0u64;
    let mut pseudo_total = 0u64;
    for view in unlabeled {
        let probs = backbone::seg_forward(store, view.weak.coords(), &bb, c)?;
        let labels = probs.argmax_labels();
        if let Some(truth) = view.truth {
            let gt = truth.labels().expect("truth clouds are labeled");
            pseudo_matches += labels.iter().zip(gt).filter(|(a, b)| a == b).count() as u64;
            pseudo_total += labels.len() as u64;
        }
        pseudo.push(labels);
    }

    // Affinity graphs live on the original geometry, not the augmented
    // views the network sees.
    let graphs: Vec<(AffinityGraph, AffinityGraph)> = if cfg.use_plgr {
        unlabeled
            .iter()
            .zip(&pseudo)
            .map(|(view, labels)| {
                build_graphs(view.original.coords(), labels, cfg.k1, cfg.k2, cfg.sigma)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let n_l: usize = labeled_weak.iter().map(PointCloud::n_points).sum();
    let n_u: usize = unlabeled.iter().map(|v| v.original.n_points()).sum();
    let parts = Cell::new((0.0, 0.0, 0.0));

    let loss_fn = |tape: &mut Tape, store: &ParamStore| -> Result<VarId> {
        let mut ls = tape.constant_scalar(0.0);
        for cloud in labeled_weak {
            let nb = backbone::feature_neighbors(cloud.coords(), &bb);
            let p = backbone::seg_forward_t(tape, store, cloud.coords(), &nb, &bb, c)?;
            let labels = cloud.labels().expect("labeled clouds carry labels");
            let l = focal_loss_t(tape, p, labels, cfg.gamma)?;
            let scaled = tape.scale(l, cfg.aggregate.cloud_weight(cloud.n_points(), n_l));
            ls = tape.add(ls, scaled)?;
        }

        let mut lu = tape.constant_scalar(0.0);
        let mut lm = tape.constant_scalar(0.0);
        let prior = if cfg.use_idtm && cfg.use_clgs {
            Some(class_prior_t(tape, store, c)?)
        } else {
            None
        };
        let geo_weight = match cfg.aggregate {
            Aggregation::Mean if n_u > 0 => 1.0 / n_u as f64,
            _ => 1.0,
        };
        for (i, view) in unlabeled.iter().enumerate() {
            let nb = backbone::feature_neighbors(view.strong.coords(), &bb);
            let p = backbone::seg_forward_t(tape, store, view.strong.coords(), &nb, &bb, c)?;
            let term = if cfg.use_idtm {
                let input = if cfg.detach_idtm_input {
                    tape.detach(p)
                } else {
                    p
                };
                let ti = estimate_idtm_t(tape, store, input, c)?;
                if cfg.use_plgr {
                    let (gi, ge) = &graphs[i];
                    let (_, _, cloud_lm) = plgr_loss_t(tape, ti, gi, ge)?;
                    let scaled = tape.scale(cloud_lm, geo_weight);
                    lm = tape.add(lm, scaled)?;
                }
                let tf = match prior {
                    Some(pr) => fuse_t(tape, ti, pr, cfg.lambda)?,
                    None => ti,
                };
                corrected_focal_loss_t(tape, p, tf, &pseudo[i], cfg.gamma)?
            } else {
                focal_loss_t(tape, p, &pseudo[i], cfg.gamma)?
            };
            let scaled = tape.scale(
                term,
                cfg.aggregate.cloud_weight(view.original.n_points(), n_u),
            );
            lu = tape.add(lu, scaled)?;
        }

        let values = (
            tape.value(ls).scalar_value()?,
            tape.value(lu).scalar_value()?,
            tape.value(lm).scalar_value()?,
        );
        for (name, v) in [
            ("supervised loss", values.0),
            ("unsupervised loss", values.1),
            ("geometric loss", values.2),
        ] {
            if !v.is_finite() {
                return Err(Error::numerical(name, format!("value {v}")));
            }
        }
        parts.set(values);

        let weighted_u = tape.scale(lu, alpha_eff);
        let weighted_m = tape.scale(lm, cfg.beta);
        let partial = tape.add(ls, weighted_u)?;
        tape.add(partial, weighted_m)
    };
    forward_backward(store, loss_fn)?;

    let (ls, lu, lm) = parts.get();
    Ok(StepOutcome {
        loss: LossBreakdown::new(ls, lu, lm, alpha_eff, cfg.beta, n_l, n_u),
        pseudo_matches,
        pseudo_total,
    })
}
