//! Differentiation substrate: matrix values, parameter store, reverse-mode
//! tape, and the finite-difference gradient checker.
//!
//! Everything trainable in this crate is expressed as a scalar loss built
//! on [`Tape`] from parameters held in a [`ParamStore`]; gradients come
//! from [`forward_backward`] and are validated against central differences
//! by [`finite_diff_check`]. All math is in `f64`.

mod fdcheck;
mod matrix;
mod store;
mod tape;

pub use fdcheck::{
    finite_diff_check, finite_diff_check_tampered, forward_backward, forward_value, GradReport,
    GroupReport, LossFn, DEFAULT_FD_STEP, DEFAULT_FD_TOL, REL_ERR_FLOOR,
};
pub use matrix::Matrix;
pub use store::{ParamGroup, ParamStore};
pub use tape::{sigmoid, softmax_in_place, softplus, Tape, VarId, WeightedEdge};
