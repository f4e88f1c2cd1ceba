//! Point-level geometric regularization of transition matrices.
//!
//! Two directed kNN graphs are built over the original (unaugmented)
//! coordinates of a cloud using its current pseudo-labels: the intrinsic
//! graph links each point to its `k1` nearest neighbors of the same
//! label, the extrinsic graph to its `k2` nearest neighbors of any other
//! label. Edge weights are the Gaussian kernel `exp(-||xi - xj||^2 /
//! sigma^2)`. No symmetrization; equidistant candidates resolve to the
//! lower point index.
//!
//! The regularizer sums weighted squared Frobenius distances between the
//! endpoint transition matrices over each graph and minimizes intrinsic
//! minus extrinsic: transitions become smooth within a label region and
//! distinct across label boundaries.

use std::sync::Arc;

use crate::diffcore::{Tape, VarId, WeightedEdge};
use crate::error::{Error, Result};
use crate::fields::TransitionField;
use crate::knn::KdTree;

/// Which relation an affinity graph encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// Same-pseudo-label neighborhoods.
    Intrinsic,
    /// Cross-pseudo-label neighborhoods.
    Extrinsic,
}

/// A directed weighted kNN graph over one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub kind: GraphKind,
    /// Directed edges (source, target, weight) in source order, neighbors
    /// sorted by (distance, index).
    pub edges: Vec<WeightedEdge>,
    pub k: usize,
    pub sigma: f64,
    n_points: usize,
}

impl AffinityGraph {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Sum of all edge weights.
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|&(_, _, w)| w).sum()
    }
}

/// Builds the intrinsic and extrinsic graphs for one pseudo-labeled cloud.
pub fn build_graphs(
    coords: &[[f64; 3]],
    labels: &[usize],
    k1: usize,
    k2: usize,
    sigma: f64,
) -> Result<(AffinityGraph, AffinityGraph)> {
    if coords.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            coords.len()
        )));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Param(format!("kernel sigma {sigma} must be positive")));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    // Points of each label, in index order.
    let mut by_label: Vec<Vec<u32>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_label[l].push(i as u32);
    }
    let trees: Vec<KdTree> = by_label
        .iter()
        .map(|subset| KdTree::build(coords, subset.clone()))
        .collect();

    let inv_s2 = 1.0 / (sigma * sigma);
    let weight = |d2: f64| (-d2 * inv_s2).exp();

    let mut intrinsic = Vec::new();
    let mut extrinsic = Vec::new();
    let mut merged: Vec<(f64, u32)> = Vec::new();
    for (i, (p, &l)) in coords.iter().zip(labels).enumerate() {
        for (j, d2) in trees[l].k_nearest(p, k1, Some(i as u32)) {
            intrinsic.push((i as u32, j, weight(d2)));
        }
        // Nearest k2 among all other labels: union of per-label results,
        // reordered by (distance, index).
        merged.clear();
        for (other, tree) in trees.iter().enumerate() {
            if other == l || tree.is_empty() {
                continue;
            }
            for (j, d2) in tree.k_nearest(p, k2, None) {
                merged.push((d2, j));
            }
        }
        merged.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(d2, j) in merged.iter().take(k2) {
            extrinsic.push((i as u32, j, weight(d2)));
        }
    }
    let n_points = coords.len();
    Ok((
        AffinityGraph {
            kind: GraphKind::Intrinsic,
            edges: intrinsic,
            k: k1,
            sigma,
            n_points,
        },
        AffinityGraph {
            kind: GraphKind::Extrinsic,
            edges: extrinsic,
            k: k2,
            sigma,
            n_points,
        },
    ))
}

/// The two weighted sums and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricLoss {
    /// Weighted squared-difference sum over the intrinsic graph.
    pub intrinsic: f64,
    /// Weighted squared-difference sum over the extrinsic graph.
    pub extrinsic: f64,
    /// intrinsic - extrinsic, the quantity training minimizes.
    pub total: f64,
}

fn edge_sum(field: &TransitionField, graph: &AffinityGraph) -> Result<f64> {
    if graph.n_points != field.n_points() {
        return Err(Error::Shape(format!(
            "graph over {} points against {} transition matrices",
            graph.n_points,
            field.n_points()
        )));
    }
    let mut total = 0.0;
    for &(s, d, w) in &graph.edges {
        let (a, b) = (field.point(s as usize), field.point(d as usize));
        let mut sq = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let diff = x - y;
            sq += diff * diff;
        }
        total += w * sq;
    }
    Ok(total)
}

/// Evaluates the regularizer for one cloud's transition field.
pub fn plgr_loss(
    field: &TransitionField,
    intrinsic: &AffinityGraph,
    extrinsic: &AffinityGraph,
) -> Result<GeometricLoss> {
    let mi = edge_sum(field, intrinsic)?;
    let me = edge_sum(field, extrinsic)?;
    Ok(GeometricLoss {
        intrinsic: mi,
        extrinsic: me,
        total: mi - me,
    })
}

/// Tape version: returns (intrinsic, extrinsic, total) scalar nodes for
/// the transition node `field` (n x C^2).
pub fn plgr_loss_t(
    tape: &mut Tape,
    field: VarId,
    intrinsic: &AffinityGraph,
    extrinsic: &AffinityGraph,
) -> Result<(VarId, VarId, VarId)> {
    let mi = tape.edge_diff_sq_sum(field, Arc::new(intrinsic.edges.clone()))?;
    let me = tape.edge_diff_sq_sum(field, Arc::new(extrinsic.edges.clone()))?;
    let lm = tape.sub(mi, me)?;
    Ok((mi, me, lm))
}
