//! Scalar-loss driver and the central-difference gradient checker.
//!
//! `forward_backward` is the single entry point training uses: it rebuilds
//! the tape through a caller-supplied closure, backpropagates, and adds
//! leaf adjoints into the store's accumulators (so two calls without a
//! reset double every gradient). The closure must be deterministic given
//! the store contents; all batch data and seeds live in its captures.
//!
//! `finite_diff_check` compares those analytic gradients against central
//! differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time, using the
//! relative error |ga - gfd| / max(|ga|, |gfd|, 1e-8).

use crate::diffcore::store::ParamStore;
use crate::diffcore::tape::{Tape, VarId};
use crate::error::{Error, Result};

/// Default perturbation for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const DEFAULT_FD_TOL: f64 = 1e-4;
/// Floor inside the relative-error denominator; errors below it are
/// treated as absolute.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// A loss builder: constructs the graph for one scalar loss on `tape`,
/// reading parameters from `store`.
pub trait LossFn: Fn(&mut Tape, &ParamStore) -> Result<VarId> {}
impl<F: Fn(&mut Tape, &ParamStore) -> Result<VarId>> LossFn for F {}

/// Evaluates the loss and accumulates gradients into `store`. Errors with
/// the offending group name if the loss or any gradient is non-finite.
pub fn forward_backward(store: &mut ParamStore, loss_fn: impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let loss_id = loss_fn(&mut tape, store)?;
    let loss = tape.value(loss_id).scalar_value()?;
    if !loss.is_finite() {
        return Err(Error::numerical("loss", format!("value {loss}")));
    }
    let grads = tape.backward(loss_id)?;
    tape.accumulate_param_grads(&grads, store)?;
    if let Some(name) = store.first_non_finite() {
        return Err(Error::numerical(
            format!("gradient of '{name}'"),
            "non-finite after backward",
        ));
    }
    Ok(loss)
}

/// Evaluates the loss without touching gradients.
pub fn forward_value(store: &ParamStore, loss_fn: impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let loss_id = loss_fn(&mut tape, store)?;
    tape.value(loss_id).scalar_value()
}

/// Per-group outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    /// Worst relative error across the group's coordinates.
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Outcome of checking one loss against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Names of failing groups, for diagnostics.
    pub fn failures(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect()
    }
}

/// Checks every coordinate of every group in `store` against central
/// differences of `loss_fn`. The store's parameter values are restored
/// exactly; gradient accumulators are left holding the analytic gradient.
pub fn finite_diff_check(
    store: &mut ParamStore,
    loss_fn: impl LossFn,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    finite_diff_check_tampered(store, loss_fn, step, tolerance, |_| {})
}

/// `finite_diff_check` with a hook that may modify the analytic gradients
/// before comparison. The hook exists for negative-control fixtures that
/// must demonstrate the checker catching a broken gradient; production
/// callers use `finite_diff_check`.
pub fn finite_diff_check_tampered(
    store: &mut ParamStore,
    loss_fn: impl LossFn,
    step: f64,
    tolerance: f64,
    tamper: impl FnOnce(&mut ParamStore),
) -> Result<GradReport> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Param(format!("finite-difference step {step}")));
    }
    store.reset_grads();
    forward_backward(store, &loss_fn)?;
    tamper(store);
    let analytic: Vec<(String, Vec<f64>)> = store
        .groups()
        .map(|g| (g.name().to_string(), g.grads().to_vec()))
        .collect();

    let mut groups = Vec::with_capacity(analytic.len());
    for (name, grads) in analytic {
        let mut max_rel = 0.0f64;
        for i in 0..grads.len() {
            let original = store.get(&name)?.values()[i];
            store.get_mut(&name)?.values_mut()[i] = original + step;
            let plus = forward_value(store, &loss_fn)?;
            store.get_mut(&name)?.values_mut()[i] = original - step;
            let minus = forward_value(store, &loss_fn)?;
            store.get_mut(&name)?.values_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numerical(
                    format!("finite difference of '{name}'[{i}]"),
                    format!("perturbed losses {plus}, {minus}"),
                ));
            }
            let fd = (plus - minus) / (2.0 * step);
            let ga = grads[i];
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(REL_ERR_FLOOR);
            max_rel = max_rel.max(rel);
        }
        let passed = max_rel < tolerance;
        groups.push(GroupReport {
            name,
            max_rel_err: max_rel,
            passed,
        });
    }
    Ok(GradReport {
        step,
        tolerance,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::matrix::Matrix;

    /// loss = sum(w^2) + sum(b): smooth, with a known closed form.
    fn quadratic(tape: &mut Tape, store: &ParamStore) -> Result<VarId> {
        let w = tape.param(store, "w", 1, 3)?;
        let b = tape.param(store, "b", 1, 2)?;
        let sq = tape.mul(w, w)?;
        let s1 = tape.sum(sq);
        let s2 = tape.sum(b);
        tape.add(s1, s2)
    }

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_group("w", vec![1.0, 2.0, 3.0]).unwrap();
        s.add_group("b", vec![-0.5, 0.25]).unwrap();
        s
    }

    #[test]
    fn quadratic_loss_and_gradient_are_exact() {
        let mut store = quadratic_store();
        let loss = forward_backward(&mut store, quadratic).unwrap();
        assert_eq!(loss, 14.0 - 0.25);
        assert_eq!(store.get("w").unwrap().grads(), &[2.0, 4.0, 6.0]);
        assert_eq!(store.get("b").unwrap().grads(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_doubles_accumulators() {
        let mut store = quadratic_store();
        forward_backward(&mut store, quadratic).unwrap();
        forward_backward(&mut store, quadratic).unwrap();
        assert_eq!(store.get("w").unwrap().grads(), &[4.0, 8.0, 12.0]);
        store.reset_grads();
        forward_backward(&mut store, quadratic).unwrap();
        assert_eq!(store.get("w").unwrap().grads(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let mut a = quadratic_store();
        let mut b = quadratic_store();
        let la = forward_backward(&mut a, quadratic).unwrap();
        let lb = forward_backward(&mut b, quadratic).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        for (ga, gb) in a.groups().zip(b.groups()) {
            for (x, y) in ga.grads().iter().zip(gb.grads()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn finite_difference_agrees_on_smooth_loss() {
        let mut store = quadratic_store();
        let report =
            finite_diff_check(&mut store, quadratic, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures());
        // Quadratics are exact under central differences up to rounding.
        assert!(report.max_rel_err() < 1e-8, "err {}", report.max_rel_err());
        // Parameter values restored exactly.
        assert_eq!(store.get("w").unwrap().values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unused_parameter_has_zero_error() {
        let mut store = quadratic_store();
        store.add_group("unused", vec![5.0]).unwrap();
        let report =
            finite_diff_check(&mut store, quadratic, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        let g = report.groups.iter().find(|g| g.name == "unused").unwrap();
        assert_eq!(g.max_rel_err, 0.0);
        assert!(g.passed);
    }

    #[test]
    fn tampered_gradient_is_caught_and_named() {
        let mut store = quadratic_store();
        let report = finite_diff_check_tampered(
            &mut store,
            quadratic,
            DEFAULT_FD_STEP,
            DEFAULT_FD_TOL,
            |s| {
                let g = s.get_mut("w").unwrap();
                // 1% scaling of one coordinate is far outside tolerance.
                let bad = g.grads()[0] * 1.01;
                let delta = bad - g.grads()[0];
                s.accumulate_grad("w", &[delta, 0.0, 0.0]).unwrap();
            },
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["w"]);
    }

    #[test]
    fn non_finite_loss_is_a_numerical_error() {
        let mut store = ParamStore::new();
        store.add_group("x", vec![-1.0]).unwrap();
        let log_loss = |tape: &mut Tape, store: &ParamStore| -> Result<VarId> {
            let x = tape.param(store, "x", 1, 1)?;
            let l = tape.ln(x);
            Ok(tape.sum(l))
        };
        let err = forward_backward(&mut store, log_loss).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "got {err:?}");
    }

    #[test]
    fn relu_kink_away_from_zero_still_checks() {
        // ReLU is differentiable off the kink; parameters straddle it.
        let mut store = ParamStore::new();
        store.add_group("x", vec![0.7, -0.9, 2.3]).unwrap();
        let loss = |tape: &mut Tape, store: &ParamStore| -> Result<VarId> {
            let x = tape.param(store, "x", 1, 3)?;
            let r = tape.relu(x);
            let sq = tape.mul(r, r)?;
            Ok(tape.sum(sq))
        };
        let report = finite_diff_check(&mut store, loss, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = quadratic_store();
        let constant = |tape: &mut Tape, _: &ParamStore| -> Result<VarId> {
            Ok(tape.constant(Matrix::scalar(3.5)))
        };
        let loss = forward_backward(&mut store, constant).unwrap();
        assert_eq!(loss, 3.5);
        assert!(store.groups().all(|g| g.grads().iter().all(|&v| v == 0.0)));
    }
}
