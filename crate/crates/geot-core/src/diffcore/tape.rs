//! Reverse-mode differentiation tape over dense matrices.
//!
//! The tape is rebuilt for every loss evaluation: builder methods compute
//! values eagerly and record one node per operation, `backward` then walks
//! the nodes in reverse, accumulating adjoints only for nodes that can
//! reach the loss. Ops are array-level (one matmul is one node), which
//! keeps node counts small enough to differentiate full training steps.
//!
//! Invariants:
//! - evaluation and backward order are fixed, so identical inputs give
//!   bit-identical values and gradients within one build;
//! - every leaf created from a parameter group records the group name, and
//!   its adjoint has the exact shape of the group;
//! - `detach` blocks gradient flow and is the only op that does.

use std::sync::Arc;

use crate::diffcore::matrix::Matrix;
use crate::diffcore::store::ParamStore;
use crate::error::{Error, Result};
use crate::knn::NeighborLists;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Directed weighted edge used by graph-sum ops: (source row, target row,
/// weight).
pub type WeightedEdge = (u32, u32, f64);

enum Op {
    /// Constant or parameter input; `param` names the source group.
    Leaf { param: Option<String> },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Ln(VarId),
    Exp(VarId),
    /// Elementwise power with constant exponent; base must be >= 0 and the
    /// exponent either 0 or >= 1 for the derivative to stay finite at 0.
    Powf(VarId, f64),
    Relu(VarId),
    Softplus(VarId),
    /// max(x, limit); gradient passes where x > limit.
    ClampMin(VarId, f64),
    MatMul(VarId, VarId),
    /// (n x k) + (1 x k), the bias-add pattern.
    AddBcastRow(VarId, VarId),
    /// (n x k) * (n x 1) broadcast along columns.
    MulBcastCol(VarId, VarId),
    /// (n x k) / (n x 1) broadcast along columns.
    DivBcastCol(VarId, VarId),
    RowSum(VarId),
    Sum(VarId),
    RowSoftmax(VarId),
    /// Picks element `idx[i]` from row i, giving an n x 1 column.
    GatherRows(VarId, Arc<Vec<usize>>),
    /// Per-row vector-matrix product: row i of `p` (length c) times the
    /// c x c matrix stored flat in row i of `t`.
    RowVecMat(VarId, VarId),
    /// Per-row, per-column max over neighbor rows; `argmax` stores the
    /// winning source row for each output element.
    NeighborMax { input: VarId, argmax: Vec<u32> },
    /// sum_e w_e * ||row(src_e) - row(dst_e)||^2, a scalar.
    EdgeDiffSqSum {
        input: VarId,
        edges: Arc<Vec<WeightedEdge>>,
    },
    ConcatCols(VarId, VarId),
    /// Same buffer, new shape (element count preserved).
    Reshape(VarId),
    /// Identity forward, zero backward.
    Detach(VarId),
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node (valid immediately after the builder call).
    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    // ── Inputs ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf { param: None }, value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> VarId {
        self.constant(Matrix::scalar(v))
    }

    /// Leaf holding a copy of parameter group `name`, shaped `rows x cols`.
    pub fn param(
        &mut self,
        store: &ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<VarId> {
        let group = store.get(name)?;
        let value = Matrix::from_vec(rows, cols, group.values().to_vec()).map_err(|_| {
            Error::Shape(format!(
                "parameter group '{}' has {} values, expected {}x{}",
                name,
                group.len(),
                rows,
                cols
            ))
        })?;
        Ok(self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
        ))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same(&self, a: VarId, b: VarId, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.same_shape(vb) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )))
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same(a, b, "sub")?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same(a, b, "mul")?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.value(a).map(|v| k * v);
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.value(a).map(|v| v + k);
        self.push(Op::AddScalar(a), out)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), out)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn powf(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.value(a).map(|v| v.powf(k));
        self.push(Op::Powf(a, k), out)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn clamp_min(&mut self, a: VarId, limit: f64) -> VarId {
        let out = self.value(a).map(|v| v.max(limit));
        self.push(Op::ClampMin(a, limit), out)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Adds the 1 x k row `r` to every row of the n x k matrix `a`.
    pub fn add_bcast_row(&mut self, a: VarId, r: VarId) -> Result<VarId> {
        let (va, vr) = (self.value(a), self.value(r));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape(format!(
                "add_bcast_row: {}x{} + {}x{}",
                va.rows(),
                va.cols(),
                vr.rows(),
                vr.cols()
            )));
        }
        let mut out = va.clone();
        let row = vr.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBcastRow(a, r), out))
    }

    fn check_col_vec(&self, a: VarId, v: VarId, what: &str) -> Result<()> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.cols() != 1 || vv.rows() != va.rows() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} with column {}x{}",
                va.rows(),
                va.cols(),
                vv.rows(),
                vv.cols()
            )));
        }
        Ok(())
    }

    /// Multiplies row i of `a` by element i of the column vector `v`.
    pub fn mul_bcast_col(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        self.check_col_vec(a, v, "mul_bcast_col")?;
        let col = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, &s) in col.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(Op::MulBcastCol(a, v), out))
    }

    /// Divides row i of `a` by element i of the column vector `v`.
    pub fn div_bcast_col(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        self.check_col_vec(a, v, "div_bcast_col")?;
        let col = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, &s) in col.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o /= s);
        }
        Ok(self.push(Op::DivBcastCol(a, v), out))
    }

    pub fn row_sum(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), 1);
        for i in 0..va.rows() {
            out.set(i, 0, va.row(i).iter().sum());
        }
        self.push(Op::RowSum(a), out)
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::scalar(total))
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn row_softmax(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(Op::RowSoftmax(a), out)
    }

    /// Column vector of `a[i, idx[i]]`.
    pub fn gather_rows(&mut self, a: VarId, idx: Vec<usize>) -> Result<VarId> {
        let va = self.value(a);
        if idx.len() != va.rows() {
            return Err(Error::Shape(format!(
                "gather_rows: {} indices for {} rows",
                idx.len(),
                va.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= va.cols()) {
            return Err(Error::Shape(format!(
                "gather_rows: column {} out of range (matrix has {})",
                bad,
                va.cols()
            )));
        }
        let mut out = Matrix::zeros(va.rows(), 1);
        for (i, &c) in idx.iter().enumerate() {
            out.set(i, 0, va.get(i, c));
        }
        Ok(self.push(Op::GatherRows(a, Arc::new(idx)), out))
    }

    /// Row i of the output is row i of `p` (length c) times the c x c
    /// matrix stored row-major in row i of `t` (length c*c).
    pub fn row_vec_mat(&mut self, p: VarId, t: VarId) -> Result<VarId> {
        let (vp, vt) = (self.value(p), self.value(t));
        let c = vp.cols();
        if vt.rows() != vp.rows() || vt.cols() != c * c {
            return Err(Error::Shape(format!(
                "row_vec_mat: probs {}x{} with transitions {}x{}",
                vp.rows(),
                vp.cols(),
                vt.rows(),
                vt.cols()
            )));
        }
        let mut out = Matrix::zeros(vp.rows(), c);
        for i in 0..vp.rows() {
            let pr = vp.row(i);
            let tr = vt.row(i);
            let or = out.row_mut(i);
            for (m, &pm) in pr.iter().enumerate() {
                let trow = &tr[m * c..(m + 1) * c];
                for (o, &tv) in or.iter_mut().zip(trow) {
                    *o += pm * tv;
                }
            }
        }
        Ok(self.push(Op::RowVecMat(p, t), out))
    }

    /// Element (i, j) of the output is the max of `a[n, j]` over the
    /// neighbors n of row i. Every row must have at least one neighbor.
    pub fn neighbor_max(&mut self, a: VarId, neighbors: Arc<NeighborLists>) -> Result<VarId> {
        let va = self.value(a);
        if neighbors.n_rows() != va.rows() {
            return Err(Error::Shape(format!(
                "neighbor_max: {} neighbor lists for {} rows",
                neighbors.n_rows(),
                va.rows()
            )));
        }
        let cols = va.cols();
        let mut out = Matrix::zeros(va.rows(), cols);
        let mut argmax = vec![0u32; va.rows() * cols];
        for i in 0..va.rows() {
            let nbrs = neighbors.row(i);
            if nbrs.is_empty() {
                return Err(Error::Shape(format!(
                    "neighbor_max: row {i} has no neighbors"
                )));
            }
            let orow = out.row_mut(i);
            let arow = &mut argmax[i * cols..(i + 1) * cols];
            for (j, (o, am)) in orow.iter_mut().zip(arow.iter_mut()).enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_src = nbrs[0];
                for &n in nbrs {
                    let v = va.get(n as usize, j);
                    if v > best {
                        best = v;
                        best_src = n;
                    }
                }
                *o = best;
                *am = best_src;
            }
        }
        Ok(self.push(Op::NeighborMax { input: a, argmax }, out))
    }

    /// Scalar sum over weighted edges of the squared row difference:
    /// `sum_e w_e * ||a[src_e, :] - a[dst_e, :]||^2`.
    pub fn edge_diff_sq_sum(&mut self, a: VarId, edges: Arc<Vec<WeightedEdge>>) -> Result<VarId> {
        let va = self.value(a);
        let n = va.rows() as u32;
        let mut total = 0.0;
        for &(s, d, w) in edges.iter() {
            if s >= n || d >= n {
                return Err(Error::Shape(format!(
                    "edge ({s}, {d}) out of range for {n} rows"
                )));
            }
            let (rs, rd) = (va.row(s as usize), va.row(d as usize));
            let mut sq = 0.0;
            for (&x, &y) in rs.iter().zip(rd) {
                let diff = x - y;
                sq += diff * diff;
            }
            total += w * sq;
        }
        Ok(self.push(Op::EdgeDiffSqSum { input: a, edges }, Matrix::scalar(total)))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Shape(format!(
                "concat_cols: {} rows vs {}",
                va.rows(),
                vb.rows()
            )));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut out = Matrix::zeros(va.rows(), ca + cb);
        for i in 0..va.rows() {
            let orow = out.row_mut(i);
            orow[..ca].copy_from_slice(va.row(i));
            orow[ca..].copy_from_slice(vb.row(i));
        }
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Same elements, new shape; row-major order is preserved.
    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let out = self.value(a).reshaped(rows, cols)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let out = self.value(a).clone();
        self.push(Op::Detach(a), out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Adjoints of every node with respect to the scalar at `loss`,
    /// restricted to nodes that can reach it. Unreachable nodes get `None`.
    pub fn backward(&mut self, loss: VarId) -> Result<Vec<Option<Matrix>>> {
        self.value(loss).scalar_value().map_err(|_| {
            Error::Shape(format!(
                "backward target must be scalar, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            ))
        })?;

        // Reachability: a node matters only if the loss depends on it.
        let mut needed = vec![false; self.nodes.len()];
        needed[loss.0] = true;
        for i in (0..self.nodes.len()).rev() {
            if !needed[i] {
                continue;
            }
            self.nodes[i].op.for_each_input(|v| needed[v.0] = true);
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !needed[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        // Accumulates `delta` into the adjoint slot of `id`.
        fn acc(grads: &mut [Option<Matrix>], id: VarId, shape: (usize, usize), f: impl FnOnce(&mut Matrix)) {
            let slot = grads[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            f(slot);
        }
        let shape_of = |id: VarId| {
            let v = self.value(id);
            (v.rows(), v.cols())
        };

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, shape_of(*a), |m| m.add_scaled(g, 1.0));
                acc(grads, *b, shape_of(*b), |m| m.add_scaled(g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, shape_of(*a), |m| m.add_scaled(g, 1.0));
                acc(grads, *b, shape_of(*b), |m| m.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &bv) in m.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                });
                acc(grads, *b, shape_of(*b), |m| {
                    for ((o, &gv), &av) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, k) => acc(grads, *a, shape_of(*a), |m| m.add_scaled(g, *k)),
            Op::AddScalar(a) => acc(grads, *a, shape_of(*a), |m| m.add_scaled(g, 1.0)),
            Op::Ln(a) => {
                let va = self.value(*a);
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv / x;
                    }
                });
            }
            Op::Exp(a) => {
                let out = &self.nodes[i].value;
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &e) in m.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gv * e;
                    }
                });
            }
            Op::Powf(a, k) => {
                let (va, k) = (self.value(*a), *k);
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if k != 0.0 {
                            *o += gv * k * x.powf(k - 1.0);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * sigmoid(x);
                    }
                });
            }
            Op::ClampMin(a, limit) => {
                let (va, limit) = (self.value(*a), *limit);
                acc(grads, *a, shape_of(*a), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if x > limit {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.matmul_t(vb)?;
                let db = va.t_matmul(g)?;
                acc(grads, *a, shape_of(*a), |m| m.add_scaled(&da, 1.0));
                acc(grads, *b, shape_of(*b), |m| m.add_scaled(&db, 1.0));
            }
            Op::AddBcastRow(a, r) => {
                acc(grads, *a, shape_of(*a), |m| m.add_scaled(g, 1.0));
                acc(grads, *r, shape_of(*r), |m| {
                    let row = m.row_mut(0);
                    for i in 0..g.rows() {
                        for (o, &gv) in row.iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MulBcastCol(a, v) => {
                let (va, vv) = (self.value(*a), self.value(*v));
                acc(grads, *a, shape_of(*a), |m| {
                    for i in 0..g.rows() {
                        let s = vv.get(i, 0);
                        for (o, &gv) in m.row_mut(i).iter_mut().zip(g.row(i)) {
                            *o += gv * s;
                        }
                    }
                });
                acc(grads, *v, shape_of(*v), |m| {
                    for i in 0..g.rows() {
                        let mut dot = 0.0;
                        for (&gv, &av) in g.row(i).iter().zip(va.row(i)) {
                            dot += gv * av;
                        }
                        let cur = m.get(i, 0);
                        m.set(i, 0, cur + dot);
                    }
                });
            }
            Op::DivBcastCol(a, v) => {
                let (va, vv) = (self.value(*a), self.value(*v));
                acc(grads, *a, shape_of(*a), |m| {
                    for i in 0..g.rows() {
                        let s = vv.get(i, 0);
                        for (o, &gv) in m.row_mut(i).iter_mut().zip(g.row(i)) {
                            *o += gv / s;
                        }
                    }
                });
                acc(grads, *v, shape_of(*v), |m| {
                    for i in 0..g.rows() {
                        let s = vv.get(i, 0);
                        let mut dot = 0.0;
                        for (&gv, &av) in g.row(i).iter().zip(va.row(i)) {
                            dot += gv * av;
                        }
                        let cur = m.get(i, 0);
                        m.set(i, 0, cur - dot / (s * s));
                    }
                });
            }
            Op::RowSum(a) => {
                acc(grads, *a, shape_of(*a), |m| {
                    for i in 0..m.rows() {
                        let gv = g.get(i, 0);
                        m.row_mut(i).iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.get(0, 0);
                acc(grads, *a, shape_of(*a), |m| {
                    m.data_mut().iter_mut().for_each(|o| *o += gv);
                });
            }
            Op::RowSoftmax(a) => {
                let out = &self.nodes[i].value;
                acc(grads, *a, shape_of(*a), |m| {
                    for r in 0..out.rows() {
                        let p = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                        for ((o, &pv), &gv) in m.row_mut(r).iter_mut().zip(p).zip(gr) {
                            *o += pv * (gv - dot);
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let idx = Arc::clone(idx);
                acc(grads, *a, shape_of(*a), |m| {
                    for (r, &c) in idx.iter().enumerate() {
                        let cur = m.get(r, c);
                        m.set(r, c, cur + g.get(r, 0));
                    }
                });
            }
            Op::RowVecMat(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let c = vp.cols();
                acc(grads, *p, shape_of(*p), |m| {
                    for r in 0..vp.rows() {
                        let gr = g.row(r);
                        let tr = vt.row(r);
                        let mr = m.row_mut(r);
                        for (mi, o) in mr.iter_mut().enumerate() {
                            let trow = &tr[mi * c..(mi + 1) * c];
                            let mut dot = 0.0;
                            for (&gv, &tv) in gr.iter().zip(trow) {
                                dot += gv * tv;
                            }
                            *o += dot;
                        }
                    }
                });
                acc(grads, *t, shape_of(*t), |m| {
                    for r in 0..vp.rows() {
                        let gr = g.row(r);
                        let pr = vp.row(r);
                        let mr = m.row_mut(r);
                        for (mi, &pv) in pr.iter().enumerate() {
                            let mrow = &mut mr[mi * c..(mi + 1) * c];
                            for (o, &gv) in mrow.iter_mut().zip(gr) {
                                *o += pv * gv;
                            }
                        }
                    }
                });
            }
            Op::NeighborMax { input, argmax, .. } => {
                let cols = g.cols();
                acc(grads, *input, shape_of(*input), |m| {
                    for r in 0..g.rows() {
                        for j in 0..cols {
                            let src = argmax[r * cols + j] as usize;
                            let cur = m.get(src, j);
                            m.set(src, j, cur + g.get(r, j));
                        }
                    }
                });
            }
            Op::EdgeDiffSqSum { input, edges } => {
                let edges = Arc::clone(edges);
                let va = self.value(*input);
                let gv = g.get(0, 0);
                acc(grads, *input, shape_of(*input), |m| {
                    for &(s, d, w) in edges.iter() {
                        let (s, d) = (s as usize, d as usize);
                        for j in 0..va.cols() {
                            let diff = va.get(s, j) - va.get(d, j);
                            let delta = 2.0 * w * gv * diff;
                            let cs = m.get(s, j);
                            m.set(s, j, cs + delta);
                            let cd = m.get(d, j);
                            m.set(d, j, cd - delta);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                acc(grads, *a, shape_of(*a), |m| {
                    for r in 0..m.rows() {
                        for (o, &gv) in m.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *o += gv;
                        }
                    }
                });
                acc(grads, *b, shape_of(*b), |m| {
                    for r in 0..m.rows() {
                        for (o, &gv) in m.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, *a, shape_of(*a), |m| {
                    for (o, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                });
            }
            Op::Detach(_) => {}
        }
        Ok(())
    }

    /// Adds leaf adjoints into the gradient accumulators of their source
    /// parameter groups. Leaves without an adjoint contribute zero.
    pub fn accumulate_param_grads(
        &self,
        grads: &[Option<Matrix>],
        store: &mut ParamStore,
    ) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads[i] {
                    store.accumulate_grad(name, g.data())?;
                }
            }
        }
        Ok(())
    }
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(VarId)) {
        match self {
            Op::Leaf { .. } => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBcastRow(a, b)
            | Op::MulBcastCol(a, b)
            | Op::DivBcastCol(a, b)
            | Op::RowVecMat(a, b)
            | Op::ConcatCols(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Ln(a)
            | Op::Exp(a)
            | Op::Powf(a, _)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::ClampMin(a, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::RowSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Detach(a) => f(*a),
            Op::NeighborMax { input, .. } | Op::EdgeDiffSqSum { input, .. } => f(*input),
        }
    }
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place stable softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
