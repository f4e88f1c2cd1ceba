//! Confusion-matrix evaluation and label upsampling.
//!
//! All metrics derive from one C x C count table: per-class
//! intersection-over-union `TP / (TP + FP + FN)`, Dice coefficient `2TP /
//! (2TP + FP + FN)`, and pointwise accuracy `trace / total`. Classes that
//! appear in neither the predictions nor the ground truth have no defined
//! score and are excluded from the means.
//!
//! Counts accumulate across clouds through [`ConfusionMatrix::merge`], so
//! a dataset-level report uses pooled counts rather than a mean of
//! per-cloud scores.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::knn::KdTree;

/// Prediction-against-truth count table; rows index ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_labels(gt: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} predictions against {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let mut m = Self::new(n_classes);
        for (&g, &p) in gt.iter().zip(pred) {
            m.record(g, p)?;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.n_classes || pred >= self.n_classes {
            return Err(Error::Shape(format!(
                "label pair ({gt}, {pred}) out of range for {} classes",
                self.n_classes
            )));
        }
        self.counts[gt * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another table's counts into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Shape(format!(
                "merging {}-class confusion into {}-class",
                other.n_classes, self.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.count(c, c);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..self.n_classes {
            if other != c {
                fp += self.count(other, c);
                fn_ += self.count(c, other);
            }
        }
        (tp, fp, fn_)
    }

    /// Intersection over union for one class, or `None` when the class
    /// occurs in neither prediction nor ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Dice coefficient for one class, absent classes as in [`Self::iou`].
    pub fn dsc(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let denom = 2 * tp + fp + fn_;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let trace: u64 = (0..self.n_classes).map(|c| self.count(c, c)).sum();
        Some(trace as f64 / total as f64)
    }

    fn mean_present(&self, score: impl Fn(usize) -> Option<f64>) -> Option<f64> {
        let scores: Vec<f64> = (0..self.n_classes).filter_map(score).collect();
        if scores.is_empty() {
            return None;
        }
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.mean_present(|c| self.iou(c))
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        self.mean_present(|c| self.dsc(c))
    }
}

/// Evaluation summary with stable JSON field names; absent classes
/// serialize as nulls in the per-class arrays.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_dsc: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Fails on an empty table, where no metric is defined.
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let (Some(miou), Some(dsc), Some(acc)) = (m.mean_iou(), m.mean_dsc(), m.accuracy())
        else {
            return Err(Error::Shape(
                "metrics undefined for an empty confusion matrix".into(),
            ));
        };
        Ok(Self {
            miou,
            dsc,
            acc,
            per_class_iou: (0..m.n_classes()).map(|c| m.iou(c)).collect(),
            per_class_dsc: (0..m.n_classes()).map(|c| m.dsc(c)).collect(),
        })
    }
}

/// Evaluates predicted labels against ground truth.
pub fn evaluate(gt: &[usize], pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    MetricsReport::from_confusion(&ConfusionMatrix::from_labels(gt, pred, n_classes)?)
}

/// Default neighbor count for [`knn_vote_upsample`].
pub const DEFAULT_VOTE_K: usize = 5;

/// Extends labels predicted on a sampled subset to a full cloud: each full
/// point takes the majority label of its `k` nearest sampled points, ties
/// resolving to the lowest class index.
pub fn knn_vote_upsample(
    full_coords: &[[f64; 3]],
    sample_coords: &[[f64; 3]],
    sample_labels: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if sample_coords.len() != sample_labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} sampled points",
            sample_labels.len(),
            sample_coords.len()
        )));
    }
    if sample_coords.is_empty() {
        return Err(Error::Shape("cannot upsample from an empty sample".into()));
    }
    if k == 0 {
        return Err(Error::Param("vote neighborhood must be non-empty".into()));
    }
    let n_classes = sample_labels.iter().max().unwrap() + 1;
    let tree = KdTree::build_all(sample_coords);
    let mut out = Vec::with_capacity(full_coords.len());
    let mut votes = vec![0u32; n_classes];
    for p in full_coords {
        votes.iter_mut().for_each(|v| *v = 0);
        for (idx, _) in tree.k_nearest(p, k, None) {
            votes[sample_labels[idx as usize]] += 1;
        }
        let winner = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap();
        out.push(winner);
    }
    Ok(out)
}
