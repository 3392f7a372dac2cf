use std::collections::BTreeMap;

use super::{Gradients, Params};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
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

/// First and second moment accumulators, created lazily per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Matrix>,
    pub second: BTreeMap<String, Matrix>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (name, g) in &grads.params {
        let p = params.get(name).ok_or_else(|| Error::Missing {
            kind: "parameter",
            name: name.clone(),
        })?;
        if p.shape() != g.shape() {
            return Err(Error::Dim(format!(
                "gradient for {name} is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in &grads.params {
        let p = params.get_mut(name).expect("checked above");
        let (rows, cols) = p.shape();
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gk;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = md[k] / c1;
            let vhat = vd[k] / c2;
            pd[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> Params {
        let mut p = Params::new();
        p.insert("x".into(), Matrix::scalar(x));
        p
    }

    fn grad(g: f64) -> Gradients {
        let mut grads = Gradients::default();
        grads.params.insert("x".into(), Matrix::scalar(g));
        grads
    }

    #[test]
    fn zero_gradient_is_identity_and_counts_a_step() {
        let mut p = one_param(0.7);
        let mut st = OptimizerState::new(AdamConfig::default());
        assert_eq!(st.step, 0);
        adam_step(&mut p, &grad(0.0), &mut st).unwrap();
        assert_eq!(p["x"].get(0, 0), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn quadratic_converges_like_the_scalar_recurrence() {
        // independent scalar Adam recurrence on f(x) = x^2
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!(x.abs() < 1e-2, "reference recurrence ended at {x}");

        let mut p = one_param(1.0);
        let mut st = OptimizerState::new(AdamConfig::with_lr(0.1));
        for _ in 0..200 {
            let g = 2.0 * p["x"].get(0, 0);
            adam_step(&mut p, &grad(g), &mut st).unwrap();
        }
        let got = p["x"].get(0, 0);
        assert!(got.abs() < 1e-2);
        assert!((got - x).abs() < 1e-12);
        assert_eq!(st.step, 200);
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut p = one_param(1.0);
        p.insert("y".into(), Matrix::scalar(5.0));
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        assert_eq!(p["y"].get(0, 0), 5.0);
        assert!(p["x"].get(0, 0) < 1.0);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut p = one_param(1.0);
        let mut grads = Gradients::default();
        grads.params.insert("x".into(), Matrix::zeros(2, 1));
        let mut st = OptimizerState::new(AdamConfig::default());
        assert!(adam_step(&mut p, &grads, &mut st).is_err());
        assert_eq!(st.step, 0);
        let mut st = OptimizerState::new(AdamConfig::with_lr(0.0));
        assert!(adam_step(&mut p, &grad(1.0), &mut st).is_err());
    }
}
