//! Adam with decoupled weight decay.
//!
//! Parameters first shrink by `lr * weight_decay`, then move against the
//! bias-corrected first moment scaled by the second: the decay never
//! enters the moment estimates. Moments are kept per parameter group in
//! store order, so the optimizer must be created against the same store
//! layout it later steps.
//!
//! The moment buffers and step counter round-trip through checkpoint
//! stores under reserved `opt.` group names, which keeps a resumed run on
//! the exact update trajectory of an uninterrupted one.

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};

/// Group-name prefix for first-moment buffers in checkpoints.
pub const OPT_M_PREFIX: &str = "opt.m.";
/// Group-name prefix for second-moment buffers in checkpoints.
pub const OPT_V_PREFIX: &str = "opt.v.";
/// Single-value group holding the step counter.
pub const OPT_STEP_GROUP: &str = "opt.t";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
        ] {
            if !v.is_finite() || v < lo || v >= hi {
                return Err(Error::Param(format!("{name} {v} must lie in [{lo}, {hi})")));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Param(format!("eps {} must be positive", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Param(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    group: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    moments: Vec<Moments>,
    t: u64,
}

impl AdamW {
    /// Allocates zeroed moments matching the store's current groups.
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let moments = store
            .groups()
            .map(|g| Moments {
                group: g.name().to_string(),
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            })
            .collect();
        Ok(Self {
            cfg,
            moments,
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the store's accumulated gradients. Gradients are
    /// left in place; the caller decides when to reset them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Param(format!(
                "learning rate {lr} must be non-negative"
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for slot in &mut self.moments {
            let group = store.get_mut(&slot.group)?;
            let (values, grads) = group.values_and_grads();
            if values.len() != slot.m.len() {
                return Err(Error::Shape(format!(
                    "group '{}' has {} values, optimizer state has {}",
                    slot.group,
                    values.len(),
                    slot.m.len()
                )));
            }
            for i in 0..values.len() {
                let g = grads[i];
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }

    /// Appends the moment buffers and step counter to a checkpoint store.
    pub fn export_state(&self, out: &mut ParamStore) -> Result<()> {
        for slot in &self.moments {
            out.add_group(format!("{OPT_M_PREFIX}{}", slot.group), slot.m.clone())?;
            out.add_group(format!("{OPT_V_PREFIX}{}", slot.group), slot.v.clone())?;
        }
        out.add_group(OPT_STEP_GROUP, vec![self.t as f64])
    }

    /// Restores moments and step counter saved by [`Self::export_state`].
    pub fn import_state(&mut self, src: &ParamStore) -> Result<()> {
        for slot in &mut self.moments {
            for (buf, prefix) in [(&mut slot.m, OPT_M_PREFIX), (&mut slot.v, OPT_V_PREFIX)] {
                let group = src.get(&format!("{prefix}{}", slot.group))?;
                if group.len() != buf.len() {
                    return Err(Error::Shape(format!(
                        "checkpoint group '{}' has {} values, expected {}",
                        group.name(),
                        group.len(),
                        buf.len()
                    )));
                }
                buf.copy_from_slice(group.values());
            }
        }
        let t = src.get(OPT_STEP_GROUP)?.values()[0];
        if t < 0.0 || t.fract() != 0.0 {
            return Err(Error::Param(format!("step counter {t} is not a count")));
        }
        self.t = t as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_group("w", values).unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = store_with(vec![1.0]);
        store.accumulate_grad("w", &[0.5]).unwrap();
        let mut opt = AdamW::new(no_decay(), &store).unwrap();
        opt.step(&mut store, 0.1).unwrap();
        // m = 0.05, v = 2.5e-4; bias correction restores m_hat = 0.5,
        // v_hat = 0.25, so the move is lr * 0.5 / (0.5 + eps).
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        let got = store.get("w").unwrap().values()[0];
        assert_eq!(got, expected);
        assert!((got - 0.9).abs() < 1e-8);
    }

    #[test]
    fn first_step_size_is_one_learning_rate() {
        // Bias correction makes the initial move lr * |g| / (|g| + eps),
        // essentially lr for any non-tiny gradient.
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        for _ in 0..50 {
            let g: f64 = rng.gen_range(-5.0..5.0);
            if g.abs() < 1e-3 {
                continue;
            }
            let mut store = store_with(vec![0.0]);
            store.accumulate_grad("w", &[g]).unwrap();
            let mut opt = AdamW::new(no_decay(), &store).unwrap();
            opt.step(&mut store, 0.01).unwrap();
            let moved = store.get("w").unwrap().values()[0].abs();
            assert!(moved <= 0.01 + 1e-12);
            assert!(moved > 0.0099);
        }
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let cfg = AdamWConfig::default();
        let mut store = store_with(vec![2.0, -3.0]);
        let mut opt = AdamW::new(cfg, &store).unwrap();
        opt.step(&mut store, 0.5).unwrap();
        // Zero gradient leaves the moments at zero; only decay acts.
        let w = store.get("w").unwrap().values();
        assert_eq!(w[0], 2.0 * (1.0 - 0.5 * 0.01));
        assert_eq!(w[1], -3.0 * (1.0 - 0.5 * 0.01));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut store = store_with(vec![0.25, -1.5, 3.75]);
        let before = store.get("w").unwrap().values().to_vec();
        store.accumulate_grad("w", &[1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        for _ in 0..5 {
            opt.step(&mut store, 0.0).unwrap();
        }
        assert_eq!(store.get("w").unwrap().values(), &before[..]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut rng = ChaCha20Rng::seed_from_u64(62);
        let mut store = store_with((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut opt = AdamW::new(no_decay(), &store).unwrap();
        for _ in 0..500 {
            let grads: Vec<f64> = store.get("w").unwrap().values().iter().map(|w| 2.0 * w).collect();
            store.reset_grads();
            store.accumulate_grad("w", &grads).unwrap();
            opt.step(&mut store, 0.05).unwrap();
        }
        for &w in store.get("w").unwrap().values() {
            assert!(w.abs() < 0.05, "stalled at {w}");
        }
    }

    #[test]
    fn state_round_trip_resumes_exact_trajectory() {
        let mut rng = ChaCha20Rng::seed_from_u64(63);
        let grads: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |resume_after: Option<usize>| -> Vec<f64> {
            let mut store = store_with(vec![0.3, -0.7, 1.1]);
            let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
            for (i, g) in grads.iter().enumerate() {
                if resume_after == Some(i) {
                    let mut ckpt = ParamStore::new();
                    opt.export_state(&mut ckpt).unwrap();
                    let mut fresh = AdamW::new(AdamWConfig::default(), &store).unwrap();
                    fresh.import_state(&ckpt).unwrap();
                    opt = fresh;
                }
                store.reset_grads();
                store.accumulate_grad("w", g).unwrap();
                opt.step(&mut store, 0.02).unwrap();
            }
            store.get("w").unwrap().values().to_vec()
        };
        let continuous = run(None);
        let resumed = run(Some(3));
        assert_eq!(continuous, resumed);
    }

    #[test]
    fn import_rejects_mismatched_state() {
        let store = store_with(vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        let mut ckpt = ParamStore::new();
        ckpt.add_group("opt.m.w", vec![0.0]).unwrap();
        ckpt.add_group("opt.v.w", vec![0.0]).unwrap();
        ckpt.add_group(OPT_STEP_GROUP, vec![1.0]).unwrap();
        assert!(opt.import_state(&ckpt).is_err());
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let store = store_with(vec![0.0]);
        for cfg in [
            AdamWConfig {
                beta1: 1.0,
                ..AdamWConfig::default()
            },
            AdamWConfig {
                beta2: -0.1,
                ..AdamWConfig::default()
            },
            AdamWConfig {
                eps: 0.0,
                ..AdamWConfig::default()
            },
            AdamWConfig {
                weight_decay: -1.0,
                ..AdamWConfig::default()
            },
        ] {
            assert!(AdamW::new(cfg, &store).is_err());
        }
        let mut store = store_with(vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        assert!(opt.step(&mut store, -0.1).is_err());
        assert!(opt.step(&mut store, f64::NAN).is_err());
    }
}
