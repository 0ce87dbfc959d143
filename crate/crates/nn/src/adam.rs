use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for one [`ParamSet`] layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// Apply one update and return the new snapshot.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet) -> Result<ParamSet> {
        self.m.check_same_layout(params)?;
        self.m.check_same_layout(grads)?;
        if !grads.all_finite() {
            return Err(NnError::Domain("non-finite gradient passed to adam".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = params.clone();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name)?.data();
            let m = self.m.values_mut(&name)?;
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v.values_mut(&name)?;
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = self.m.get(&name)?.data();
            let v = self.v.get(&name)?.data();
            for ((p, mi), vi) in out.values_mut(&name)?.iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(out)
    }
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![v])).unwrap();
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let p = scalar_set(0.7);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let out = adam.step(&p, &scalar_set(0.0)).unwrap();
        assert_eq!(out, p);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let p = scalar_set(0.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&p, &scalar_set(1.0)).unwrap();
        let m1 = adam.first_moment().get("x").unwrap().data()[0];
        adam.step(&p, &scalar_set(0.0)).unwrap();
        let m2 = adam.first_moment().get("x").unwrap().data()[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = scalar_set(1.0);
        let mut adam = Adam::new(&p, AdamConfig::with_lr(1e-3));
        let out = adam.step(&p, &scalar_set(1.0)).unwrap();
        let x = out.get("x").unwrap().data()[0];
        // m̂ = v̂ = 1 after bias correction.
        assert!((x - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((x - 0.999).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = scalar_set(0.0);
        let mut adam = Adam::new(&p, AdamConfig::with_lr(1e-2));
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.get("x").unwrap().data()[0];
            p = adam.step(&p, &scalar_set(0.37)).unwrap();
            last = before - p.get("x").unwrap().data()[0];
        }
        assert!((last - 1e-2).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let p = scalar_set(1.0);
        let mut adam = Adam::new(&p, AdamConfig::default());
        let mut g = ParamSet::new();
        g.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(adam.step(&p, &g), Err(NnError::Dimension(_))));
    }
}
