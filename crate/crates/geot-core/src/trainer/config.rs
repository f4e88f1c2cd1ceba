//! Training configuration and its flat text format.
//!
//! Config files are UTF-8 "key = value" lines; '#' starts a comment and
//! blank lines are skipped. Every key has a default except `data`, which
//! names the dataset directory and must be present. Unknown keys are
//! errors so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::objective::Aggregation;

/// Everything one training run depends on besides the dataset contents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Dataset root holding labeled/, unlabeled/, test/.
    pub data: PathBuf,
    pub classes: usize,
    pub epochs: usize,
    /// Labeled clouds per step; an epoch covers the labeled set once.
    pub batch_labeled: usize,
    /// Unlabeled clouds per step, drawn cyclically.
    pub batch_unlabeled: usize,
    /// Weight of the corrected unsupervised loss.
    pub alpha: f64,
    /// Weight of the geometric regularizer.
    pub beta: f64,
    /// Fusion weight of the class prior against per-point transitions.
    pub lambda: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Gaussian kernel width of the affinity graphs.
    pub sigma: f64,
    /// Same-label neighbors per point.
    pub k1: usize,
    /// Other-label neighbors per point.
    pub k2: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub hidden: usize,
    pub blocks: usize,
    /// Spatial neighbors for backbone feature pooling.
    pub k_feat: usize,
    pub use_idtm: bool,
    pub use_plgr: bool,
    pub use_clgs: bool,
    /// Ramp alpha from zero over the first tenth of training instead of
    /// trusting step-0 pseudo-labels at full weight.
    pub warmup: bool,
    /// Cut the gradient path from the transition estimator back into the
    /// strong-branch prediction it reads.
    pub detach_idtm_input: bool,
    pub aggregate: Aggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::new(),
            classes: 9,
            epochs: 30,
            batch_labeled: 2,
            batch_unlabeled: 2,
            alpha: 1.0,
            beta: 0.1,
            lambda: 0.9,
            gamma: 2.0,
            sigma: 1.0,
            k1: 8,
            k2: 8,
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            hidden: 64,
            blocks: 2,
            k_feat: 8,
            use_idtm: true,
            use_plgr: true,
            use_clgs: true,
            warmup: true,
            detach_idtm_input: true,
            aggregate: Aggregation::Mean,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str_at(&text, path)
    }

    /// Parses config text; `origin` names the source in errors.
    pub fn from_str_at(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut saw_data = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, lineno, format!("expected 'key = value', got {raw:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "data" {
                saw_data = true;
            }
            cfg.apply(key, value)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        }
        if !saw_data {
            return Err(Error::Config(format!(
                "config {} does not set the required key 'data'",
                origin.display()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for key '{key}'")))
        }
        match key {
            "data" => self.data = PathBuf::from(value),
            "classes" => self.classes = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_labeled" => self.batch_labeled = num(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "k1" => self.k1 = num(key, value)?,
            "k2" => self.k2 = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "k_feat" => self.k_feat = num(key, value)?,
            "use_idtm" => self.use_idtm = num(key, value)?,
            "use_plgr" => self.use_plgr = num(key, value)?,
            "use_clgs" => self.use_clgs = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "detach_idtm_input" => self.detach_idtm_input = num(key, value)?,
            "aggregate" => {
                self.aggregate = match value {
                    "mean" => Aggregation::Mean,
                    "sum" => Aggregation::Sum,
                    other => {
                        return Err(Error::Config(format!(
                            "aggregate must be 'mean' or 'sum', got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.as_os_str().is_empty() {
            return Err(Error::Config("dataset path is empty".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes {} must be at least 2",
                self.classes
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
            ("k1", self.k1),
            ("k2", self.k2),
            ("hidden", self.hidden),
            ("k_feat", self.k_feat),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} must lie in [0, 1]",
                self.lambda
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma {} must be positive",
                self.sigma
            )));
        }
        if self.use_plgr && !self.use_idtm {
            return Err(Error::Config(
                "use_plgr regularizes the estimated transition matrices; it requires use_idtm"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            hidden: self.hidden,
            blocks: self.blocks,
            k_feat: self.k_feat,
            seed: self.seed,
        }
    }

    /// Epochs at the high learning rate: nine tenths of the schedule,
    /// rounded, never zero.
    pub fn high_lr_epochs(&self) -> usize {
        ((self.epochs as f64 * 0.9).round() as usize).max(1)
    }

    /// Learning rate for a zero-based epoch index; the final tenth of the
    /// schedule drops by 10x.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.high_lr_epochs() {
            self.lr
        } else {
            self.lr / 10.0
        }
    }
}
