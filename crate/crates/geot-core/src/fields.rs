//! Row-stochastic value types produced by the model: per-point class
//! distributions and per-point class-transition matrices.
//!
//! Both types validate on construction: entries lie in [0, 1] exactly and
//! every distribution row sums to 1 within `ROW_SUM_TOL`. Softmax and
//! convex fusion keep entries inside [0, 1] in floating point (the
//! rounding of `(1-w)*a + w*b` with operands in the unit interval cannot
//! cross 1), so the entry bound carries no slack.

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// Allowed deviation of a distribution row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-9;

fn check_rows_stochastic(m: &Matrix, row_len: usize, what: &str) -> Result<()> {
    debug_assert_eq!(m.cols() % row_len, 0);
    for r in 0..m.rows() {
        for chunk in m.row(r).chunks_exact(row_len) {
            let mut sum = 0.0;
            for &v in chunk {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::numerical(
                        what.to_string(),
                        format!("entry {v} outside [0, 1] in row {r}"),
                    ));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::numerical(
                    what.to_string(),
                    format!("row {r} sums to {sum}"),
                ));
            }
        }
    }
    Ok(())
}

/// Per-point class distributions: an n x C matrix whose rows are
/// probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    m: Matrix,
}

impl ProbField {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.cols() == 0 {
            return Err(Error::Shape("probability field needs >= 1 class".into()));
        }
        check_rows_stochastic(&m, m.cols(), "probability field")?;
        Ok(ProbField { m })
    }

    pub fn n_points(&self) -> usize {
        self.m.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.m.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.m.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Per-point argmax with ties resolved to the lowest class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.m.rows())
            .map(|i| argmax_lowest(self.m.row(i)))
            .collect()
    }
}

/// Index of the strict maximum, lowest index on ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-point class-transition matrices: row k of the backing n x C^2
/// matrix holds a C x C row-stochastic matrix flattened row-major. Entry
/// (m, n) of point k's matrix is the probability that true class m is
/// observed as (pseudo-)label n.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionField {
    m: Matrix,
    n_classes: usize,
}

impl TransitionField {
    pub fn from_matrix(m: Matrix, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || m.cols() != n_classes * n_classes {
            return Err(Error::Shape(format!(
                "transition field of {} classes needs {} columns, got {}",
                n_classes,
                n_classes * n_classes,
                m.cols()
            )));
        }
        check_rows_stochastic(&m, n_classes, "transition field")?;
        Ok(TransitionField { m, n_classes })
    }

    /// Field of identity matrices (the no-noise assumption).
    pub fn identity(n_points: usize, n_classes: usize) -> Self {
        let mut m = Matrix::zeros(n_points, n_classes * n_classes);
        for k in 0..n_points {
            for c in 0..n_classes {
                m.set(k, c * n_classes + c, 1.0);
            }
        }
        TransitionField { m, n_classes }
    }

    pub fn n_points(&self) -> usize {
        self.m.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Point k's matrix as a flat row-major C^2 slice.
    pub fn point(&self, k: usize) -> &[f64] {
        self.m.row(k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Entry (row, col) of point k's matrix.
    pub fn entry(&self, k: usize, row: usize, col: usize) -> f64 {
        self.m.get(k, row * self.n_classes + col)
    }
}
