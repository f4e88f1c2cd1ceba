//! Per-point class-transition estimation and application.
//!
//! Each point's predicted class distribution is mapped through a single
//! affine layer to C x C logits whose rows are then softmaxed, giving a
//! row-stochastic matrix `T` that models how that point's true class
//! turns into its (noisy) pseudo-label. Applying `T` to a distribution
//! `p` yields the noisy distribution `q = p T`, which is what gets
//! compared against pseudo-labels.
//!
//! The affine map starts at zero, so the initial transitions are uniform
//! rows; the diagonal must be learned, not assumed.

use crate::diffcore::{softmax_in_place, Matrix, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::fields::{ProbField, TransitionField};

/// Name of the affine weight group, shaped C x C^2.
pub const WEIGHT_GROUP: &str = "trans.w";
/// Name of the affine bias group, shaped 1 x C^2.
pub const BIAS_GROUP: &str = "trans.b";

/// Registers zero-initialized estimator parameters for `n_classes`.
pub fn init_transition_params(n_classes: usize, store: &mut ParamStore) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "transition estimator needs >= 2 classes, got {n_classes}"
        )));
    }
    let c2 = n_classes * n_classes;
    store.add_group(WEIGHT_GROUP, vec![0.0; n_classes * c2])?;
    store.add_group(BIAS_GROUP, vec![0.0; c2])?;
    Ok(())
}

/// Tape version of the estimator: probability node (n x C) to transition
/// node (n x C^2), rows of each per-point matrix softmaxed.
pub fn estimate_idtm_t(
    tape: &mut Tape,
    store: &ParamStore,
    probs: VarId,
    n_classes: usize,
) -> Result<VarId> {
    let c2 = n_classes * n_classes;
    let n = tape.value(probs).rows();
    let w = tape.param(store, WEIGHT_GROUP, n_classes, c2)?;
    let b = tape.param(store, BIAS_GROUP, 1, c2)?;
    let mut logits = tape.matmul(probs, w)?;
    logits = tape.add_bcast_row(logits, b)?;
    // Row-major n x C^2 relayouts to (n*C) x C for per-row softmax.
    let stacked = tape.reshape(logits, n * n_classes, n_classes)?;
    let soft = tape.row_softmax(stacked);
    tape.reshape(soft, n, c2)
}

/// Evaluates the estimator outside any tape.
pub fn estimate_idtm(store: &ParamStore, probs: &ProbField) -> Result<TransitionField> {
    let c = probs.n_classes();
    let c2 = c * c;
    let w = store.get(WEIGHT_GROUP)?;
    let b = store.get(BIAS_GROUP)?;
    if w.len() != c * c2 || b.len() != c2 {
        return Err(Error::Shape(format!(
            "transition parameters sized for a different class count (got {} + {} values for C = {c})",
            w.len(),
            b.len()
        )));
    }
    let mut out = Matrix::zeros(probs.n_points(), c2);
    for k in 0..probs.n_points() {
        let p = probs.row(k);
        let row = out.row_mut(k);
        row.copy_from_slice(b.values());
        for (m, &pm) in p.iter().enumerate() {
            let wrow = &w.values()[m * c2..(m + 1) * c2];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += pm * wv;
            }
        }
        for chunk in row.chunks_exact_mut(c) {
            softmax_in_place(chunk);
        }
    }
    TransitionField::from_matrix(out, c)
}

/// `q = p T` for one point: `q[n] = sum_m p[m] T[m][n]` with `t` the
/// flattened row-major C x C matrix. Preserves the probability simplex.
pub fn apply_transition(p: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let c = p.len();
    if t.len() != c * c {
        return Err(Error::Shape(format!(
            "transition of {} values against {} classes",
            t.len(),
            c
        )));
    }
    let mut q = vec![0.0; c];
    for (m, &pm) in p.iter().enumerate() {
        let row = &t[m * c..(m + 1) * c];
        for (o, &tv) in q.iter_mut().zip(row) {
            *o += pm * tv;
        }
    }
    Ok(q)
}

/// Applies each point's transition to its distribution.
pub fn apply_transition_field(probs: &ProbField, field: &TransitionField) -> Result<ProbField> {
    if probs.n_points() != field.n_points() || probs.n_classes() != field.n_classes() {
        return Err(Error::Shape(format!(
            "{}x{} probabilities against {}x{} transitions",
            probs.n_points(),
            probs.n_classes(),
            field.n_points(),
            field.n_classes()
        )));
    }
    let c = probs.n_classes();
    let mut out = Matrix::zeros(probs.n_points(), c);
    for k in 0..probs.n_points() {
        let q = apply_transition(probs.row(k), field.point(k))?;
        out.row_mut(k).copy_from_slice(&q);
    }
    ProbField::from_matrix(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, DEFAULT_FD_STEP, DEFAULT_FD_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_probs(rng: &mut ChaCha20Rng, n: usize, c: usize) -> ProbField {
        let mut m = Matrix::zeros(n, c);
        for i in 0..n {
            let row = m.row_mut(i);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen::<f64>() + 1e-3;
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        ProbField::from_matrix(m).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_rows() {
        let mut store = ParamStore::new();
        init_transition_params(4, &mut store).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let probs = random_probs(&mut rng, 6, 4);
        let field = estimate_idtm(&store, &probs).unwrap();
        for k in 0..6 {
            for v in field.point(k) {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn strong_diagonal_bias_concentrates_mass() {
        // Bias +10 on diagonal logits: softmax row weight e^10 vs C-1 ones.
        for c in 2..=5usize {
            let mut store = ParamStore::new();
            init_transition_params(c, &mut store).unwrap();
            {
                let bias = store.get_mut(BIAS_GROUP).unwrap().values_mut();
                for m in 0..c {
                    bias[m * c + m] = 10.0;
                }
            }
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            let probs = random_probs(&mut rng, 3, c);
            let field = estimate_idtm(&store, &probs).unwrap();
            for k in 0..3 {
                for m in 0..c {
                    assert!(
                        field.entry(k, m, m) > 0.999,
                        "C={c} diagonal {}",
                        field.entry(k, m, m)
                    );
                }
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_matrices() {
        let mut store = ParamStore::new();
        init_transition_params(3, &mut store).unwrap();
        // Make the estimator non-trivial.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        store
            .get_mut(WEIGHT_GROUP)
            .unwrap()
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let m = Matrix::from_vec(2, 3, vec![0.2, 0.5, 0.3, 0.2, 0.5, 0.3]).unwrap();
        let probs = ProbField::from_matrix(m).unwrap();
        let field = estimate_idtm(&store, &probs).unwrap();
        assert_eq!(field.point(0), field.point(1));
    }

    #[test]
    fn apply_transition_hand_case() {
        let q = apply_transition(&[0.7, 0.3], &[0.9, 0.1, 0.2, 0.8]).unwrap();
        assert!((q[0] - 0.69).abs() < 1e-12);
        assert!((q[1] - 0.31).abs() < 1e-12);
    }

    #[test]
    fn identity_transition_is_exact() {
        let p = [0.123, 0.456, 0.421];
        let field = TransitionField::identity(1, 3);
        let q = apply_transition(&p, field.point(0)).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn constant_row_transition_absorbs_any_input() {
        // Every row equal to r: output is r regardless of p.
        let r = [0.6, 0.3, 0.1];
        let t: Vec<f64> = r.iter().cycle().take(9).cloned().collect();
        let q = apply_transition(&[0.2, 0.05, 0.75], &t).unwrap();
        for (a, b) in q.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_transitions_preserve_the_simplex() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_transition_params(5, &mut store).unwrap();
        store
            .get_mut(WEIGHT_GROUP)
            .unwrap()
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-2.0..2.0));
        for _ in 0..200 {
            let probs = random_probs(&mut rng, 4, 5);
            let field = estimate_idtm(&store, &probs).unwrap();
            // Constructors validated both fields; the product revalidates.
            apply_transition_field(&probs, &field).unwrap();
        }
    }

    #[test]
    fn tape_and_plain_estimators_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_transition_params(4, &mut store).unwrap();
        for group in [WEIGHT_GROUP, BIAS_GROUP] {
            store
                .get_mut(group)
                .unwrap()
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.5..1.5));
        }
        let probs = random_probs(&mut rng, 7, 4);
        let plain = estimate_idtm(&store, &probs).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs.matrix().clone());
        let t = estimate_idtm_t(&mut tape, &store, p, 4).unwrap();
        for (a, b) in tape.value(t).data().iter().zip(plain.matrix().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_transition_params(3, &mut store).unwrap();
        for group in [WEIGHT_GROUP, BIAS_GROUP] {
            store
                .get_mut(group)
                .unwrap()
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let probs = random_probs(&mut rng, 5, 3);
        let pm = probs.matrix().clone();
        // Loss couples every transition entry: sum of squares.
        let loss = move |tape: &mut Tape, store: &ParamStore| {
            let p = tape.constant(pm.clone());
            let t = estimate_idtm_t(tape, store, p, 3)?;
            let sq = tape.mul(t, t)?;
            Ok(tape.sum(sq))
        };
        let report = finite_diff_check(&mut store, loss, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures {:?}", report.failures());
    }
}
