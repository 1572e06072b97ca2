//! Momentum SGD, AdamW and the warmup-plus-cosine learning-rate schedule.

pub mod convergence;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GradientSet, ModelWeights, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    MomentumSgd {
        #[serde(default = "default_beta1")]
        beta1: f64,
    },
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig::AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn momentum_sgd(beta1: f64) -> Self {
        OptimizerConfig::MomentumSgd { beta1 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::MomentumSgd { beta1 } => (0.0..1.0).contains(&beta1),
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adamw()
    }
}

/// Moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Option<Matrix>,
    /// Updates applied so far; skipped steps do not count.
    pub step: u64,
}

fn check_step_inputs(op: &'static str, w: &Matrix, m: &Matrix, g: &Matrix, lr: f64) -> Result<()> {
    if w.shape() != g.shape() || m.shape() != g.shape() {
        return Err(Error::contract(
            op,
            format!("w {:?}, m {:?}, g {:?}", w.shape(), m.shape(), g.shape()),
        ));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::contract(op, format!("learning rate {lr}")));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite {
            what: format!("{op} gradient"),
        });
    }
    Ok(())
}

/// `m ← β₁·m + (1−β₁)·g`, then `w ← w − η·m`.
pub fn momentum_sgd_step(w: &mut Matrix, m: &mut Matrix, g: &Matrix, beta1: f64, lr: f64) -> Result<()> {
    check_step_inputs("momentum_sgd_step", w, m, g, lr)?;
    for ((wi, mi), &gi) in w.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(g.as_slice()) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *wi -= lr * *mi;
    }
    Ok(())
}

/// Decoupled weight decay Adam with bias correction. `step` is the 1-based
/// index of this update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    w: &mut Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    g: &Matrix,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_step_inputs("adamw_step", w, m, g, lr)?;
    if v.shape() != g.shape() || step == 0 {
        return Err(Error::contract("adamw_step", format!("v {:?}, step {step}", v.shape())));
    }
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((wi, mi), vi), &gi) in w
        .as_mut_slice()
        .iter_mut()
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
        .zip(g.as_slice())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *wi -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *wi);
    }
    Ok(())
}

/// Optimizer state for every parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimizerConfig,
    moments: BTreeMap<ParamId, Moments>,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, weights: &ModelWeights) -> Result<Self> {
        config.validate()?;
        let with_v = matches!(config, OptimizerConfig::AdamW { .. });
        let moments = weights
            .param_ids()
            .into_iter()
            .map(|id| {
                let (r, c) = weights.get(id).shape();
                (
                    id,
                    Moments {
                        m: Matrix::zeros(r, c),
                        v: with_v.then(|| Matrix::zeros(r, c)),
                        step: 0,
                    },
                )
            })
            .collect();
        Ok(OptimState { config, moments })
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(&id)
    }

    /// Updates one parameter from its averaged gradient.
    pub fn update_param(&mut self, weights: &mut ModelWeights, id: ParamId, g: &Matrix, lr: f64) -> Result<()> {
        let state = self
            .moments
            .get_mut(&id)
            .ok_or_else(|| Error::contract("optimizer step", format!("unknown parameter {id}")))?;
        let w = weights.get_mut(id);
        state.step += 1;
        match self.config {
            OptimizerConfig::MomentumSgd { beta1 } => momentum_sgd_step(w, &mut state.m, g, beta1, lr),
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let v = state.v.as_mut().expect("AdamW keeps second moments");
                adamw_step(w, &mut state.m, v, g, state.step, lr, beta1, beta2, eps, weight_decay)
            }
        }
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                what: format!("gradient of {id}"),
            },
            other => other,
        })
    }

    /// Applies every present gradient. Parameters without one (an empty
    /// active set) keep both weights and moments unchanged this step.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &GradientSet, lr: f64) -> Result<()> {
        for (&id, g) in grads.iter() {
            self.update_param(weights, id, g, lr)?;
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear ramp from 0 over the first
/// `⌈0.1·total⌉` steps, then cosine decay from `base` to `0.1·base`.
pub fn lr_at(step: u64, total: u64, base: f64) -> f64 {
    let warmup = warmup_steps(total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let floor = 0.1 * base;
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let progress = (step.min(total) - warmup) as f64 / span as f64;
    floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn warmup_steps(total: u64) -> u64 {
    (total as f64 * 0.1).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_momentum_step() {
        let mut w = Matrix::zeros(1, 1);
        let mut m = Matrix::zeros(1, 1);
        let g = Matrix::filled(1, 1, 1.0);
        momentum_sgd_step(&mut w, &mut m, &g, 0.9, 0.5).unwrap();
        assert!((m[(0, 0)] - 0.1).abs() < 1e-16);
        assert!((w[(0, 0)] + 0.05).abs() < 1e-16);
    }

    #[test]
    fn zero_beta_is_plain_sgd() {
        let mut w = Matrix::filled(1, 2, 1.0);
        let mut m = Matrix::zeros(1, 2);
        let g = Matrix::from_rows(&[&[0.5, -2.0]]);
        momentum_sgd_step(&mut w, &mut m, &g, 0.0, 0.1).unwrap();
        assert_eq!(m, g);
        assert_eq!(w, Matrix::from_rows(&[&[1.0 - 0.05, 1.0 + 0.2]]));
    }

    #[test]
    fn momentum_decays_geometrically() {
        let mut w = Matrix::zeros(1, 1);
        let mut m = Matrix::filled(1, 1, 1.0);
        let zero = Matrix::zeros(1, 1);
        for _ in 0..5 {
            momentum_sgd_step(&mut w, &mut m, &zero, 0.5, 1.0).unwrap();
        }
        assert_eq!(m[(0, 0)], 0.5f64.powi(5));
    }

    #[test]
    fn momentum_closed_form_on_integer_gradients() {
        // β₁ = 1/2 keeps every partial sum exactly representable.
        let beta = 0.5;
        let grads = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0];
        let mut w = Matrix::zeros(1, 1);
        let mut m = Matrix::zeros(1, 1);
        for t in 0..grads.len() {
            momentum_sgd_step(&mut w, &mut m, &Matrix::filled(1, 1, grads[t]), beta, 1.0).unwrap();
            let closed: f64 = (1.0 - beta)
                * (0..=t).map(|k| beta.powi((t - k) as i32) * grads[k]).sum::<f64>();
            assert_eq!(m[(0, 0)], closed);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut w = Matrix::zeros(1, 1);
        let mut m = Matrix::zeros(1, 1);
        let g = Matrix::filled(1, 1, f64::NAN);
        assert!(matches!(
            momentum_sgd_step(&mut w, &mut m, &g, 0.9, 0.1),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_still() {
        let mut w = Matrix::from_rows(&[&[1.0, -2.0]]);
        let before = w.clone();
        let (mut m, mut v) = (Matrix::zeros(1, 2), Matrix::zeros(1, 2));
        adamw_step(&mut w, &mut m, &mut v, &Matrix::zeros(1, 2), 1, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn adamw_first_step_is_sign() {
        let mut w = Matrix::zeros(1, 3);
        let (mut m, mut v) = (Matrix::zeros(1, 3), Matrix::zeros(1, 3));
        let g = Matrix::from_rows(&[&[0.3, -7.0, 1e-3]]);
        adamw_step(&mut w, &mut m, &mut v, &g, 1, 1.0, 0.9, 0.999, 1e-8, 0.0).unwrap();
        for (wi, gi) in w.as_slice().iter().zip(g.as_slice()) {
            assert!((wi + gi.signum()).abs() < 1e-4, "{wi}");
        }
    }

    #[test]
    fn adamw_three_steps_match_hand_unrolled() {
        // f(w) = ½(2w₀² + w₁²); gradient (2w₀, w₁).
        let (b1, b2, eps, wd, lr) = (0.9, 0.999, 1e-8, 0.01, 0.1);
        let mut w = Matrix::from_rows(&[&[1.0, -1.0]]);
        let (mut m, mut v) = (Matrix::zeros(1, 2), Matrix::zeros(1, 2));
        let mut reference = [1.0f64, -1.0];
        let mut rm = [0.0f64; 2];
        let mut rv = [0.0f64; 2];
        for t in 1..=3u64 {
            let g = Matrix::from_rows(&[&[2.0 * w[(0, 0)], w[(0, 1)]]]);
            adamw_step(&mut w, &mut m, &mut v, &g, t, lr, b1, b2, eps, wd).unwrap();
            let rg = [2.0 * reference[0], reference[1]];
            for i in 0..2 {
                rm[i] = b1 * rm[i] + (1.0 - b1) * rg[i];
                rv[i] = b2 * rv[i] + (1.0 - b2) * rg[i] * rg[i];
                let mh = rm[i] / (1.0 - b1.powi(t as i32));
                let vh = rv[i] / (1.0 - b2.powi(t as i32));
                reference[i] -= lr * (mh / (vh.sqrt() + eps) + wd * reference[i]);
            }
        }
        assert!((w[(0, 0)] - reference[0]).abs() < 1e-12);
        assert!((w[(0, 1)] - reference[1]).abs() < 1e-12);
    }

    #[test]
    fn schedule_landmarks() {
        let (total, base) = (1000, 3e-3);
        assert_eq!(lr_at(0, total, base), 0.0);
        assert!((lr_at(50, total, base) - 0.5 * base).abs() < 1e-18);
        assert!((lr_at(100, total, base) - base).abs() < 1e-18);
        assert!((lr_at(total, total, base) - 0.1 * base).abs() < 1e-18);
        let w = warmup_steps(total);
        let slope_bound = base * PI / (2.0 * (total - w) as f64);
        assert!((lr_at(w, total, base) - lr_at(w + 1, total, base)).abs() <= slope_bound);
        for s in w..total {
            assert!(lr_at(s + 1, total, base) <= lr_at(s, total, base));
        }
    }

    #[test]
    fn skipped_parameters_stay_frozen_and_order_does_not_matter() {
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let w0 = ModelWeights::init(&cfg, 1).unwrap();
        let mut grads = GradientSet::new();
        let ids = w0.param_ids();
        for (i, &id) in ids.iter().enumerate().skip(1) {
            let (r, c) = w0.get(id).shape();
            grads.insert(id, crate::linalg::seeded_gaussian(r, c, 0.0, 1.0, i as u64).unwrap());
        }
        let mut w_fwd = w0.clone();
        let mut s_fwd = OptimState::new(OptimizerConfig::adamw(), &w0).unwrap();
        s_fwd.step(&mut w_fwd, &grads, 1e-3).unwrap();
        assert_eq!(w_fwd.embedding, w0.embedding);
        assert_eq!(s_fwd.moments(ParamId::Embedding).unwrap().step, 0);

        let mut w_rev = w0.clone();
        let mut s_rev = OptimState::new(OptimizerConfig::adamw(), &w0).unwrap();
        for &id in ids.iter().rev() {
            if let Some(g) = grads.get(id) {
                s_rev.update_param(&mut w_rev, id, g, 1e-3).unwrap();
            }
        }
        assert_eq!(w_fwd, w_rev);
        assert_eq!(s_fwd, s_rev);
    }
}
