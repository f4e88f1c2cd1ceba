//! Per-point segmentation network.
//!
//! The architecture is a small coordinate-MLP with local context: a linear
//! embedding of the xyz coordinates, then `blocks` rounds of {concatenate
//! each point's feature with the elementwise max over its `k_feat` spatial
//! nearest neighbors' features, linear, ReLU}, then a linear classifier
//! and row softmax. Neighbor sets come from the coordinates the network is
//! given (the augmented cloud during training), with ties broken toward
//! lower point indices.
//!
//! The network is permutation-equivariant: reordering input points
//! reorders output rows the same way, because every stage is per-point
//! except the neighbor max, which depends only on geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use crate::diffcore::{Matrix, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::fields::ProbField;
use crate::knn::{knn_neighbor_lists, NeighborLists};

/// Architecture and initialization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Feature width of every hidden layer.
    pub hidden: usize,
    /// Number of neighborhood-aggregation blocks.
    pub blocks: usize,
    /// Spatial nearest neighbors pooled per point.
    pub k_feat: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 64,
            blocks: 2,
            k_feat: 8,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.k_feat == 0 {
            return Err(Error::Config(
                "backbone hidden width and k_feat must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Parameter groups in traversal order: (name, rows, cols, fan_in).
    pub fn param_shapes(&self, n_classes: usize) -> Vec<(String, usize, usize, usize)> {
        let h = self.hidden;
        let mut shapes = vec![
            ("seg.embed.w".to_string(), 3, h, 3),
            ("seg.embed.b".to_string(), 1, h, 3),
        ];
        for b in 0..self.blocks {
            shapes.push((format!("seg.block{b}.w"), 2 * h, h, 2 * h));
            shapes.push((format!("seg.block{b}.b"), 1, h, 2 * h));
        }
        shapes.push(("seg.classify.w".to_string(), h, n_classes, h));
        shapes.push(("seg.classify.b".to_string(), 1, n_classes, h));
        shapes
    }

    /// Registers freshly initialized groups: every tensor of a layer is
    /// uniform in +-1/sqrt(fan_in), drawn from `seed` in group order.
    pub fn init_params(&self, n_classes: usize, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "backbone needs >= 2 classes, got {n_classes}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        for (name, rows, cols, fan_in) in self.param_shapes(n_classes) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            store.add_group(name, values)?;
        }
        Ok(())
    }

    /// Confirms the store holds groups of the expected shapes.
    pub fn check_store(&self, n_classes: usize, store: &ParamStore) -> Result<()> {
        for (name, rows, cols, _) in self.param_shapes(n_classes) {
            let group = store.get(&name).map_err(|_| {
                Error::Config(format!("parameter group '{name}' missing from store"))
            })?;
            if group.len() != rows * cols {
                return Err(Error::Config(format!(
                    "parameter group '{name}' has {} values, expected {}x{}",
                    group.len(),
                    rows,
                    cols
                )));
            }
        }
        Ok(())
    }
}

/// Builds the class-probability graph for one cloud on `tape`, reusing
/// precomputed neighbor lists. Returns the n x C probability node.
pub fn seg_forward_t(
    tape: &mut Tape,
    store: &ParamStore,
    coords: &[[f64; 3]],
    neighbors: &Arc<NeighborLists>,
    cfg: &BackboneConfig,
    n_classes: usize,
) -> Result<VarId> {
    cfg.validate()?;
    if coords.is_empty() {
        return Err(Error::Shape("forward pass over an empty cloud".into()));
    }
    if neighbors.n_rows() != coords.len() {
        return Err(Error::Shape(format!(
            "{} neighbor lists for {} points",
            neighbors.n_rows(),
            coords.len()
        )));
    }
    let h = cfg.hidden;
    let n = coords.len();
    let mut flat = Vec::with_capacity(n * 3);
    for p in coords {
        flat.extend_from_slice(p);
    }
    let x = tape.constant(Matrix::from_vec(n, 3, flat)?);

    let ew = tape.param(store, "seg.embed.w", 3, h)?;
    let eb = tape.param(store, "seg.embed.b", 1, h)?;
    let mut feat = tape.matmul(x, ew)?;
    feat = tape.add_bcast_row(feat, eb)?;
    feat = tape.relu(feat);

    for b in 0..cfg.blocks {
        let pooled = tape.neighbor_max(feat, Arc::clone(neighbors))?;
        let joined = tape.concat_cols(feat, pooled)?;
        let w = tape.param(store, &format!("seg.block{b}.w"), 2 * h, h)?;
        let bias = tape.param(store, &format!("seg.block{b}.b"), 1, h)?;
        feat = tape.matmul(joined, w)?;
        feat = tape.add_bcast_row(feat, bias)?;
        feat = tape.relu(feat);
    }

    let cw = tape.param(store, "seg.classify.w", h, n_classes)?;
    let cb = tape.param(store, "seg.classify.b", 1, n_classes)?;
    let mut logits = tape.matmul(feat, cw)?;
    logits = tape.add_bcast_row(logits, cb)?;
    Ok(tape.row_softmax(logits))
}

/// Spatial neighbor lists for a forward pass over `coords`.
pub fn feature_neighbors(coords: &[[f64; 3]], cfg: &BackboneConfig) -> Arc<NeighborLists> {
    Arc::new(knn_neighbor_lists(coords, cfg.k_feat))
}

/// Evaluates the network on one cloud and returns the validated
/// probability field.
pub fn seg_forward(
    store: &ParamStore,
    coords: &[[f64; 3]],
    cfg: &BackboneConfig,
    n_classes: usize,
) -> Result<ProbField> {
    let neighbors = feature_neighbors(coords, cfg);
    let mut tape = Tape::new();
    let probs = seg_forward_t(&mut tape, store, coords, &neighbors, cfg, n_classes)?;
    ProbField::from_matrix(tape.value(probs).clone())
}
