//! Classification losses and the combined training objective.
//!
//! Both branches use the focal form `-(1 - p)^gamma * ln(p)` on the
//! probability assigned to the target label, which down-weights points
//! the model already classifies confidently. The supervised branch reads
//! that probability straight from the segmentation output; the corrected
//! unsupervised branch first pushes the prediction through the point's
//! transition matrix, `q = p T`, so the loss compares against the label
//! distribution the noisy pseudo-labels are assumed to be drawn from.
//!
//! Losses are means over the points in the batch. Only the argument of
//! the logarithm is clamped; the focal weight sees the raw probability.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, VarId};
use crate::error::{Error, Result};
use crate::fields::{ProbField, TransitionField};
use crate::transition::apply_transition;

/// Focusing exponent used throughout training.
pub const FOCAL_GAMMA: f64 = 2.0;

/// How per-point losses combine across a batch. The objective is written
/// as a sum over points; the default divides by the point count so the
/// loss weights keep their meaning when batch sizes change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl Aggregation {
    /// Weight of one cloud's mean loss in the batch total, given its point
    /// count and the batch-wide count.
    pub fn cloud_weight(self, cloud_points: usize, batch_points: usize) -> f64 {
        match self {
            Aggregation::Mean => cloud_points as f64 / batch_points as f64,
            Aggregation::Sum => cloud_points as f64,
        }
    }
}

/// Floor applied inside the logarithm so a zero-probability target yields
/// a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_targets(n_points: usize, n_classes: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n_points {
        return Err(Error::Shape(format!(
            "{} targets for {} points",
            targets.len(),
            n_points
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::Shape(format!(
            "target label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    // The power rule needs gamma = 0 or gamma >= 1 for a finite derivative
    // when the focal weight reaches zero.
    if !gamma.is_finite() || (gamma != 0.0 && gamma < 1.0) {
        return Err(Error::Param(format!(
            "focal exponent {gamma} must be 0 or at least 1"
        )));
    }
    Ok(())
}

/// Focal term for one target probability.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let weight = if gamma == 0.0 {
        1.0
    } else {
        (1.0 - p).powf(gamma)
    };
    -weight * p.max(PROB_FLOOR).ln()
}

/// Mean focal loss of a prediction field against per-point targets.
pub fn focal_loss(probs: &ProbField, targets: &[usize], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_targets(probs.n_points(), probs.n_classes(), targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| focal_term(probs.row(i)[t], gamma))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Mean focal loss after pushing each prediction through its transition
/// matrix.
pub fn corrected_focal_loss(
    probs: &ProbField,
    transitions: &TransitionField,
    targets: &[usize],
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let (n, c) = (probs.n_points(), probs.n_classes());
    if transitions.n_points() != n || transitions.n_classes() != c {
        return Err(Error::Shape(format!(
            "{} transition matrices over {} classes against {n} predictions over {c}",
            transitions.n_points(),
            transitions.n_classes()
        )));
    }
    check_targets(n, c, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let q = apply_transition(probs.row(i), transitions.point(i))?;
        total += focal_term(q[t], gamma);
    }
    Ok(total / targets.len() as f64)
}

fn focal_mean_t(tape: &mut Tape, target_probs: VarId, gamma: f64) -> Result<VarId> {
    let n = tape.value(target_probs).rows();
    let neg = tape.scale(target_probs, -1.0);
    let complement = tape.add_scalar(neg, 1.0);
    let weight = tape.powf(complement, gamma);
    let clamped = tape.clamp_min(target_probs, PROB_FLOOR);
    let logp = tape.ln(clamped);
    let terms = tape.mul(weight, logp)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Tape version of [`focal_loss`]; `probs` is n x C.
pub fn focal_loss_t(
    tape: &mut Tape,
    probs: VarId,
    targets: &[usize],
    gamma: f64,
) -> Result<VarId> {
    check_gamma(gamma)?;
    {
        let v = tape.value(probs);
        check_targets(v.rows(), v.cols(), targets)?;
    }
    let picked = tape.gather_rows(probs, targets.to_vec())?;
    focal_mean_t(tape, picked, gamma)
}

/// Tape version of [`corrected_focal_loss`]; `transitions` is n x C^2.
pub fn corrected_focal_loss_t(
    tape: &mut Tape,
    probs: VarId,
    transitions: VarId,
    targets: &[usize],
    gamma: f64,
) -> Result<VarId> {
    check_gamma(gamma)?;
    {
        let v = tape.value(probs);
        check_targets(v.rows(), v.cols(), targets)?;
    }
    let noisy = tape.row_vec_mat(probs, transitions)?;
    let picked = tape.gather_rows(noisy, targets.to_vec())?;
    focal_mean_t(tape, picked, gamma)
}

/// One training step's loss terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub geometric: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub labeled_points: usize,
    pub unlabeled_points: usize,
}

impl LossBreakdown {
    pub fn new(
        supervised: f64,
        unsupervised: f64,
        geometric: f64,
        alpha: f64,
        beta: f64,
        labeled_points: usize,
        unlabeled_points: usize,
    ) -> Self {
        Self {
            supervised,
            unsupervised,
            geometric,
            total: supervised + alpha * unsupervised + beta * geometric,
            alpha,
            beta,
            labeled_points,
            unlabeled_points,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{
        finite_diff_check, Matrix, ParamStore, DEFAULT_FD_STEP, DEFAULT_FD_TOL,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_prob_matrix(rng: &mut ChaCha20Rng, n: usize, c: usize) -> Matrix {
        let mut m = Matrix::zeros(n, c);
        for i in 0..n {
            let row = m.row_mut(i);
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    fn random_transition_matrix(rng: &mut ChaCha20Rng, n: usize, c: usize) -> Matrix {
        let mut m = Matrix::zeros(n, c * c);
        for k in 0..n {
            for chunk in m.row_mut(k).chunks_exact_mut(c) {
                for v in chunk.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                }
                let s: f64 = chunk.iter().sum();
                chunk.iter_mut().for_each(|v| *v /= s);
            }
        }
        m
    }

    #[test]
    fn half_probability_hand_value() {
        // 0.25 * ln 2.
        assert!((focal_term(0.5, FOCAL_GAMMA) - 0.173287).abs() < 1e-6);
        assert!((focal_term(0.5, FOCAL_GAMMA) - 0.25 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_is_cross_entropy() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..100 {
            let p = rng.gen_range(0.001..1.0);
            assert_eq!(focal_term(p, 0.0), -p.ln());
        }
    }

    #[test]
    fn certain_prediction_costs_nothing() {
        assert_eq!(focal_term(1.0, FOCAL_GAMMA), 0.0);
    }

    #[test]
    fn zero_probability_is_large_but_finite() {
        let v = focal_term(0.0, FOCAL_GAMMA);
        assert!(v.is_finite());
        assert!((v - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mean_over_two_points_hand_value() {
        let m = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let probs = ProbField::from_matrix(m).unwrap();
        let expected = (focal_term(0.5, 2.0) + focal_term(0.75, 2.0)) / 2.0;
        let got = focal_loss(&probs, &[0, 1], 2.0).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn corrected_loss_hand_case() {
        // p = [0.7, 0.3] through [[0.9, 0.1], [0.2, 0.8]] gives q = [0.69,
        // 0.31]; the focal term at target 0 is (0.31)^2 * -ln(0.69).
        let probs = ProbField::from_matrix(Matrix::from_vec(1, 2, vec![0.7, 0.3]).unwrap())
            .unwrap();
        let t = TransitionField::from_matrix(
            Matrix::from_vec(1, 4, vec![0.9, 0.1, 0.2, 0.8]).unwrap(),
            2,
        )
        .unwrap();
        let got = corrected_focal_loss(&probs, &t, &[0], FOCAL_GAMMA).unwrap();
        let expected = 0.31f64.powi(2) * -(0.69f64.ln());
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.0356592).abs() < 1e-7);
    }

    #[test]
    fn identity_transitions_reduce_to_plain_focal() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let c = rng.gen_range(2..7);
            let probs = ProbField::from_matrix(random_prob_matrix(&mut rng, n, c)).unwrap();
            let identity = TransitionField::identity(n, c);
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let plain = focal_loss(&probs, &targets, FOCAL_GAMMA).unwrap();
            let corrected =
                corrected_focal_loss(&probs, &identity, &targets, FOCAL_GAMMA).unwrap();
            assert!(
                (plain - corrected).abs() < 1e-12,
                "plain {plain} corrected {corrected}"
            );
        }
    }

    #[test]
    fn tape_losses_match_plain_evaluation() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let (n, c) = (9, 4);
        let pm = random_prob_matrix(&mut rng, n, c);
        let tm = random_transition_matrix(&mut rng, n, c);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

        let probs = ProbField::from_matrix(pm.clone()).unwrap();
        let field = TransitionField::from_matrix(tm.clone(), c).unwrap();
        let plain_focal = focal_loss(&probs, &targets, FOCAL_GAMMA).unwrap();
        let plain_corrected =
            corrected_focal_loss(&probs, &field, &targets, FOCAL_GAMMA).unwrap();

        let mut tape = Tape::new();
        let p = tape.constant(pm);
        let t = tape.constant(tm);
        let f = focal_loss_t(&mut tape, p, &targets, FOCAL_GAMMA).unwrap();
        let cf = corrected_focal_loss_t(&mut tape, p, t, &targets, FOCAL_GAMMA).unwrap();
        assert!((tape.value(f).scalar_value().unwrap() - plain_focal).abs() < 1e-14);
        assert!((tape.value(cf).scalar_value().unwrap() - plain_corrected).abs() < 1e-14);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let (n, c) = (6, 3);
        let mut store = ParamStore::new();
        let logits: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        store.add_group("logits", logits).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let t = targets.clone();
        let loss = move |tape: &mut Tape, store: &ParamStore| {
            let z = tape.param(store, "logits", n, c)?;
            let p = tape.row_softmax(z);
            focal_loss_t(tape, p, &t, FOCAL_GAMMA)
        };
        let report = finite_diff_check(&mut store, loss, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures {:?}", report.failures());
    }

    #[test]
    fn corrected_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let (n, c) = (5, 3);
        let mut store = ParamStore::new();
        store
            .add_group(
                "p.logits",
                (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
        store
            .add_group(
                "t.logits",
                (0..n * c * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let tg = targets.clone();
        let loss = move |tape: &mut Tape, store: &ParamStore| {
            let zp = tape.param(store, "p.logits", n, c)?;
            let p = tape.row_softmax(zp);
            let zt = tape.param(store, "t.logits", n, c * c)?;
            let stacked = tape.reshape(zt, n * c, c)?;
            let soft = tape.row_softmax(stacked);
            let t = tape.reshape(soft, n, c * c)?;
            corrected_focal_loss_t(tape, p, t, &tg, FOCAL_GAMMA)
        };
        let report = finite_diff_check(&mut store, loss, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures {:?}", report.failures());
    }

    #[test]
    fn bad_targets_and_gammas_rejected() {
        let probs =
            ProbField::from_matrix(Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(focal_loss(&probs, &[2], FOCAL_GAMMA).is_err());
        assert!(focal_loss(&probs, &[0, 0], FOCAL_GAMMA).is_err());
        assert!(focal_loss(&probs, &[0], 0.5).is_err());
        assert!(focal_loss(&probs, &[0], f64::NAN).is_err());
    }

    #[test]
    fn sum_aggregation_doubles_with_duplicated_points() {
        // Literal-sum mode: a cloud's contribution is its mean times its
        // point count, so two identical points cost twice one.
        let single = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let double = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let one = focal_loss(&ProbField::from_matrix(single).unwrap(), &[0], 2.0).unwrap()
            * Aggregation::Sum.cloud_weight(1, 1);
        let two = focal_loss(&ProbField::from_matrix(double).unwrap(), &[0, 0], 2.0).unwrap()
            * Aggregation::Sum.cloud_weight(2, 2);
        assert!((two - 2.0 * one).abs() < 1e-15);

        // Mean weights over a batch sum to one.
        let w = Aggregation::Mean.cloud_weight(3, 10) + Aggregation::Mean.cloud_weight(7, 10);
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_combines_with_both_weights() {
        let b = LossBreakdown::new(1.0, 2.0, 3.0, 1.0, 0.1, 10, 190);
        assert!((b.total - 3.3).abs() < 1e-15);
        let unweighted = LossBreakdown::new(0.5, 4.0, -2.0, 0.0, 0.0, 1, 1);
        assert_eq!(unweighted.total, 0.5);
    }
}
