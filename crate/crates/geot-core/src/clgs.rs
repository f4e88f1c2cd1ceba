//! Class-level geometric smoothing.
//!
//! Annotation noise in dense point labels concentrates on boundaries
//! between spatially adjacent structures, and adjacency correlates with
//! class-index distance in the ordered label scheme used here. The class
//! prior captures that: a row-stochastic C x C matrix whose row `i` is a
//! normalized Gaussian in class-index distance, `exp(-(i - j)^2 / (2
//! sigma_i^2))`, with one learnable width per class. Widths are kept
//! positive through a softplus reparameterization.
//!
//! The prior is blended with each point's estimated transition matrix,
//! `(1 - lambda) T_point + lambda T_prior`, which keeps the result row
//! stochastic for any lambda in [0, 1].

use crate::diffcore::{softplus, Matrix, ParamStore, Tape, VarId};
use crate::error::{Error, Result};
use crate::fields::TransitionField;

/// Parameter group holding one pre-softplus width per class, shape C x 1.
pub const RHO_GROUP: &str = "clgs.rho";

/// Inverse of the softplus, defined for y > 0.
pub fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Registers the width parameters, initialized so every width starts at 1.
pub fn init_clgs_params(store: &mut ParamStore, n_classes: usize) -> Result<()> {
    store.add_group(RHO_GROUP, vec![softplus_inverse(1.0); n_classes])
}

/// Current per-class widths, after the softplus map.
pub fn prior_widths(store: &ParamStore, n_classes: usize) -> Result<Vec<f64>> {
    let group = store.get(RHO_GROUP)?;
    if group.values().len() != n_classes {
        return Err(Error::Shape(format!(
            "{RHO_GROUP} has {} entries for {n_classes} classes",
            group.values().len()
        )));
    }
    Ok(group.values().iter().map(|&r| softplus(r)).collect())
}

/// Builds the prior directly from explicit per-class widths.
pub fn class_prior_matrix(widths: &[f64]) -> Result<Matrix> {
    let c = widths.len();
    if c == 0 {
        return Err(Error::Shape("class prior needs at least one class".into()));
    }
    let mut m = Matrix::zeros(c, c);
    for (i, &sigma) in widths.iter().enumerate() {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Param(format!(
                "class prior width {sigma} for class {i} must be positive"
            )));
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        let row = m.row_mut(i);
        let mut sum = 0.0;
        for (j, slot) in row.iter_mut().enumerate() {
            let d = i as f64 - j as f64;
            *slot = (-d * d * inv).exp();
            sum += *slot;
        }
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    Ok(m)
}

/// Prior evaluated at the stored parameters.
pub fn class_prior(store: &ParamStore, n_classes: usize) -> Result<Matrix> {
    class_prior_matrix(&prior_widths(store, n_classes)?)
}

/// Tape version of [`class_prior`]: returns the C x C prior node wired to
/// the width parameters.
pub fn class_prior_t(tape: &mut Tape, store: &ParamStore, n_classes: usize) -> Result<VarId> {
    let rho = tape.param(store, RHO_GROUP, n_classes, 1)?;
    let sigma = tape.softplus(rho);
    let sigma2 = tape.mul(sigma, sigma)?;
    let inv_var = tape.powf(sigma2, -1.0);
    let mut dist = Matrix::zeros(n_classes, n_classes);
    for i in 0..n_classes {
        for j in 0..n_classes {
            let d = i as f64 - j as f64;
            dist.set(i, j, -d * d / 2.0);
        }
    }
    let dist = tape.constant(dist);
    let scaled = tape.mul_bcast_col(dist, inv_var)?;
    let kernel = tape.exp(scaled);
    let row_sums = tape.row_sum(kernel);
    tape.div_bcast_col(kernel, row_sums)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::Param(format!(
            "fusion weight {lambda} must lie in [0, 1]"
        )));
    }
    Ok(())
}

/// Blends per-point transitions with the shared prior.
pub fn fuse(field: &TransitionField, prior: &Matrix, lambda: f64) -> Result<TransitionField> {
    check_lambda(lambda)?;
    let c = field.n_classes();
    if prior.rows() != c || prior.cols() != c {
        return Err(Error::Shape(format!(
            "{}x{} prior against {c}-class transitions",
            prior.rows(),
            prior.cols()
        )));
    }
    let n = field.n_points();
    let mut out = Matrix::zeros(n, c * c);
    for k in 0..n {
        let src = field.point(k);
        let dst = out.row_mut(k);
        for r in 0..c {
            for j in 0..c {
                dst[r * c + j] = (1.0 - lambda) * src[r * c + j] + lambda * prior.get(r, j);
            }
        }
    }
    TransitionField::from_matrix(out, c)
}

/// Tape version of [`fuse`]: `field` is n x C^2, `prior` is C x C.
pub fn fuse_t(tape: &mut Tape, field: VarId, prior: VarId, lambda: f64) -> Result<VarId> {
    check_lambda(lambda)?;
    let entries = {
        let v = tape.value(prior);
        v.rows() * v.cols()
    };
    let flat = tape.reshape(prior, 1, entries)?;
    let scaled_field = tape.scale(field, 1.0 - lambda);
    let scaled_prior = tape.scale(flat, lambda);
    tape.add_bcast_row(scaled_field, scaled_prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, DEFAULT_FD_STEP, DEFAULT_FD_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [0.05, 0.5, 1.0, 3.0, 20.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_widths_are_one() {
        let mut store = ParamStore::new();
        init_clgs_params(&mut store, 5).unwrap();
        for w in prior_widths(&store, 5).unwrap() {
            assert!((w - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_width_three_class_middle_row() {
        let m = class_prior_matrix(&[1.0; 3]).unwrap();
        let row = m.row(1);
        assert!((row[0] - 0.27406).abs() < 1e-5);
        assert!((row[1] - 0.45187).abs() < 1e-5);
        assert!((row[2] - 0.27406).abs() < 1e-5);
        assert_eq!(row[0], row[2]);
    }

    #[test]
    fn prior_rows_are_stochastic() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..50 {
            let c = rng.gen_range(1..10);
            let widths: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..10.0)).collect();
            let m = class_prior_matrix(&widths).unwrap();
            crate::fields::ProbField::from_matrix(m).unwrap();
        }
    }

    #[test]
    fn prior_is_diagonal_maximal_and_unimodal() {
        for c in 2..=9usize {
            for step in 0..=20 {
                let sigma = 0.3 + step as f64 * (5.0 - 0.3) / 20.0;
                let m = class_prior_matrix(&vec![sigma; c]).unwrap();
                for i in 0..c {
                    let row = m.row(i);
                    for j in 0..c {
                        if j != i {
                            assert!(row[i] > row[j], "c={c} sigma={sigma} row {i}");
                        }
                        if j + 1 < c {
                            // Entries fall off monotonically with distance
                            // from the diagonal on either side.
                            if j + 1 <= i {
                                assert!(row[j] < row[j + 1]);
                            }
                            if j >= i {
                                assert!(row[j] > row[j + 1]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn huge_width_flattens_rows() {
        let m = class_prior_matrix(&[100.0; 9]).unwrap();
        for i in 0..9 {
            let row = m.row(i);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min < 0.01, "row {i} spread {}", max - min);
        }
    }

    #[test]
    fn invalid_widths_rejected() {
        assert!(class_prior_matrix(&[]).is_err());
        assert!(class_prior_matrix(&[1.0, 0.0]).is_err());
        assert!(class_prior_matrix(&[-1.0]).is_err());
        assert!(class_prior_matrix(&[f64::NAN]).is_err());
    }

    #[test]
    fn tape_prior_matches_plain() {
        let mut store = ParamStore::new();
        store
            .add_group(RHO_GROUP, vec![-0.3, 0.6, 1.4, 0.1])
            .unwrap();
        let mut tape = Tape::new();
        let id = class_prior_t(&mut tape, &store, 4).unwrap();
        let plain = class_prior(&store, 4).unwrap();
        let taped = tape.value(id);
        for i in 0..4 {
            for j in 0..4 {
                assert!((taped.get(i, j) - plain.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        store
            .add_group(RHO_GROUP, vec![0.2, -0.5, 1.1, 0.7, -0.1])
            .unwrap();
        // Weighted sum over entries so every row contributes a distinct
        // gradient signal.
        let mut weights = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                weights.set(i, j, ((i * 5 + j) as f64 * 0.37).sin());
            }
        }
        let loss = move |tape: &mut Tape, store: &ParamStore| {
            let prior = class_prior_t(tape, store, 5)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(prior, w)?;
            Ok(tape.sum(prod))
        };
        let report = finite_diff_check(&mut store, loss, DEFAULT_FD_STEP, DEFAULT_FD_TOL).unwrap();
        assert!(report.passed(), "failures {:?}", report.failures());
    }

    #[test]
    fn fusion_endpoints_reproduce_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let mut raw = Matrix::zeros(6, 9);
        for k in 0..6 {
            for chunk in raw.row_mut(k).chunks_exact_mut(3) {
                for v in chunk.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                }
                let s: f64 = chunk.iter().sum();
                chunk.iter_mut().for_each(|v| *v /= s);
            }
        }
        let field = TransitionField::from_matrix(raw.clone(), 3).unwrap();
        let prior = class_prior_matrix(&[0.7, 1.3, 2.0]).unwrap();

        let at_zero = fuse(&field, &prior, 0.0).unwrap();
        for k in 0..6 {
            assert_eq!(at_zero.point(k), field.point(k));
        }
        let at_one = fuse(&field, &prior, 1.0).unwrap();
        for k in 0..6 {
            for r in 0..3 {
                for j in 0..3 {
                    assert_eq!(at_one.entry(k, r, j), prior.get(r, j));
                }
            }
        }
    }

    #[test]
    fn fusion_stays_stochastic_and_matches_hand_blend() {
        let field = TransitionField::identity(2, 2);
        let prior = Matrix::from_vec(2, 2, vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        let fused = fuse(&field, &prior, 0.9).unwrap();
        // 0.1 * I + 0.9 * prior.
        assert!((fused.entry(0, 0, 0) - 0.64).abs() < 1e-15);
        assert!((fused.entry(0, 0, 1) - 0.36).abs() < 1e-15);
        assert!((fused.entry(0, 1, 0) - 0.27).abs() < 1e-15);
        assert!((fused.entry(0, 1, 1) - 0.73).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_lambda_rejected() {
        let field = TransitionField::identity(1, 2);
        let prior = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(fuse(&field, &prior, -0.1).is_err());
        assert!(fuse(&field, &prior, 1.1).is_err());
        assert!(fuse(&field, &prior, f64::NAN).is_err());
    }

    #[test]
    fn tape_fusion_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let mut raw = Matrix::zeros(4, 4);
        for k in 0..4 {
            for chunk in raw.row_mut(k).chunks_exact_mut(2) {
                let a = rng.gen_range(0.0..1.0);
                chunk[0] = a;
                chunk[1] = 1.0 - a;
            }
        }
        let field = TransitionField::from_matrix(raw.clone(), 2).unwrap();
        let prior = class_prior_matrix(&[0.9, 1.8]).unwrap();
        let plain = fuse(&field, &prior, 0.35).unwrap();

        let mut tape = Tape::new();
        let f = tape.constant(raw);
        let p = tape.constant(prior);
        let fused = fuse_t(&mut tape, f, p, 0.35).unwrap();
        let taped = tape.value(fused).clone();
        for k in 0..4 {
            for (a, b) in taped.row(k).iter().zip(plain.point(k)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        TransitionField::from_matrix(taped, 2).unwrap();
    }
}
