//! Momentum SGD on synthetic smooth objectives driven by a biased, noisy
//! distributed gradient oracle, for checking rate behavior empirically.
//!
//! The oracle averages `n` per-rank stochastic gradients (exact gradient plus
//! Gaussian noise of total variance `σ²`), then applies a fixed contraction
//! bias `ḡ = ḡ⋆ + √(1−δ)·D·ḡ⋆` with `D` diagonal in `[−1, 0]`. Hence
//! `‖ḡ − ḡ⋆‖² ≤ (1−δ)‖ḡ⋆‖²` holds for every draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::derive_seed;

/// A smooth function with a known gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
    /// Gradient Lipschitz constant (an upper bound is fine).
    fn smoothness(&self) -> f64;
    /// `inf f`, or a lower bound on it.
    fn lower_bound(&self) -> f64;
    fn initial_point(&self) -> Vec<f64>;
}

/// `½ Σ λᵢ (wᵢ − cᵢ)²` with `λ` log-spaced from `1` down to `1/condition`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
    pub start: Vec<f64>,
}

impl Quadratic {
    pub fn with_condition(dim: usize, condition: f64, seed: u64) -> Self {
        let curvature = (0..dim)
            .map(|i| {
                let frac = if dim == 1 { 0.0 } else { i as f64 / (dim - 1) as f64 };
                condition.powf(-frac)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let start = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Quadratic {
            curvature,
            center,
            start,
        }
    }

    /// Same curvature, started at the minimizer (pure noise regime).
    pub fn started_at_optimum(mut self) -> Self {
        self.start = self.center.clone();
        self
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((x, c), l)| 0.5 * l * (x - c) * (x - c))
            .sum()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((x, c), l)| l * (x - c))
            .collect()
    }

    fn smoothness(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.start.clone()
    }
}

/// `Σₖ sigmoid(aₖ·w + bₖ) + (μ/2)‖w‖²`: smooth, bounded below, non-convex.
#[derive(Clone, Debug)]
pub struct SigmoidSum {
    pub directions: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub ridge: f64,
    pub start: Vec<f64>,
}

impl SigmoidSum {
    pub fn random(dim: usize, terms: usize, ridge: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let directions = (0..terms)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let offsets = (0..terms).map(|_| normal.sample(&mut rng)).collect();
        let start = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        SigmoidSum {
            directions,
            offsets,
            ridge,
            start,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Objective for SigmoidSum {
    fn dim(&self) -> usize {
        self.start.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let ridge = 0.5 * self.ridge * w.iter().map(|x| x * x).sum::<f64>();
        self.directions
            .iter()
            .zip(&self.offsets)
            .map(|(a, b)| sigmoid(dot(a, w) + b))
            .sum::<f64>()
            + ridge
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = w.iter().map(|x| self.ridge * x).collect();
        for (a, b) in self.directions.iter().zip(&self.offsets) {
            let s = sigmoid(dot(a, w) + b);
            let coef = s * (1.0 - s);
            for (gi, ai) in g.iter_mut().zip(a) {
                *gi += coef * ai;
            }
        }
        g
    }

    fn smoothness(&self) -> f64 {
        // |sigmoid''| ≤ 1/(6√3).
        let curv = 1.0 / (6.0 * 3f64.sqrt());
        curv * self.directions.iter().map(|a| dot(a, a)).sum::<f64>() + self.ridge
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.start.clone()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Parameters of one harness run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceConfig {
    pub ranks: usize,
    pub iterations: usize,
    pub beta1: f64,
    pub lr: f64,
    /// Bias level: the oracle's relative squared error is at most `1 − δ`.
    pub delta: f64,
    /// Per-rank gradient noise standard deviation (total over coordinates).
    pub sigma: f64,
    pub seed: u64,
}

impl ConvergenceConfig {
    /// Momentum and step size from the rate-optimal choice for this objective:
    /// `β₁ = 1 − (24/δ + √(δ^½ (T+1) σ² / (n (LΔ + δΔ₁))))⁻¹` and
    /// `η = (2L + √(8L² / (δ (1−β₁)²)))⁻¹`, with `Δ₁` bounded by `‖∇f(w₀)‖²`.
    pub fn tuned(objective: &dyn Objective, ranks: usize, iterations: usize, delta: f64, sigma: f64, seed: u64) -> Self {
        let l = objective.smoothness();
        let w0 = objective.initial_point();
        let gap = objective.value(&w0) - objective.lower_bound();
        let delta1 = norm_sq(&objective.gradient(&w0));
        let denom = ranks as f64 * (l * gap + delta * delta1);
        let noise_term = (delta.sqrt() * (iterations as f64 + 1.0) * sigma * sigma / denom).sqrt();
        let one_minus_beta = 1.0 / (24.0 / delta + noise_term);
        let lr = 1.0 / (2.0 * l + (8.0 * l * l / (delta * one_minus_beta * one_minus_beta)).sqrt());
        ConvergenceConfig {
            ranks,
            iterations,
            beta1: 1.0 - one_minus_beta,
            lr,
            delta,
            sigma,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.ranks >= 1
            && self.iterations >= 1
            && (0.0..1.0).contains(&self.beta1)
            && self.lr > 0.0
            && self.delta > 0.0
            && self.delta <= 1.0
            && self.sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid convergence config {self:?}")))
        }
    }
}

/// Per-iteration `‖∇f(wₜ)‖²` for `t = 0..=T`, plus its running mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTrace {
    pub grad_norm_sq: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Largest observed `‖ḡ − ḡ⋆‖² / ‖ḡ⋆‖²`.
    pub max_relative_bias: f64,
    pub diverged: bool,
}

impl ConvergenceTrace {
    /// `(1/(T+1)) Σₜ ‖∇f(wₜ)‖²` over the whole run.
    pub fn averaged(&self) -> f64 {
        *self.running_mean.last().unwrap_or(&f64::NAN)
    }

    /// Mean of `‖∇f(wₜ)‖²` over `t ≥ start`.
    pub fn tail_mean(&self, start: usize) -> f64 {
        let tail = &self.grad_norm_sq[start.min(self.grad_norm_sq.len())..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs momentum SGD (`m ← β₁m + (1−β₁)ḡ`, `w ← w − ηm`, `m⁻¹ = 0`) for `T`
/// steps. Values above `10⁶` stop the run and flag it as diverged.
pub fn convergence_harness(objective: &dyn Objective, cfg: &ConvergenceConfig) -> Result<ConvergenceTrace> {
    cfg.validate()?;
    let d = objective.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma / (d as f64).sqrt()).expect("valid noise scale");
    let mut bias_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xb1a5));
    let contraction: Vec<f64> = (0..d).map(|_| -bias_rng.gen_range(0.0..=1.0)).collect();
    let bias_scale = (1.0 - cfg.delta).sqrt();

    let mut w = objective.initial_point();
    let mut m = vec![0.0; d];
    let mut trace = ConvergenceTrace {
        grad_norm_sq: Vec::with_capacity(cfg.iterations + 1),
        running_mean: Vec::with_capacity(cfg.iterations + 1),
        max_relative_bias: 0.0,
        diverged: false,
    };
    let mut total = 0.0;
    for t in 0..=cfg.iterations {
        let grad = objective.gradient(&w);
        let gn = norm_sq(&grad);
        total += gn;
        trace.grad_norm_sq.push(gn);
        trace.running_mean.push(total / (t + 1) as f64);
        if t == cfg.iterations {
            break;
        }

        let mut fault_free = vec![0.0; d];
        for _ in 0..cfg.ranks {
            for (acc, g) in fault_free.iter_mut().zip(&grad) {
                *acc += g + noise.sample(&mut rng);
            }
        }
        for acc in &mut fault_free {
            *acc /= cfg.ranks as f64;
        }
        let biased: Vec<f64> = fault_free
            .iter()
            .zip(&contraction)
            .map(|(g, c)| g + bias_scale * c * g)
            .collect();
        let reference = norm_sq(&fault_free);
        if reference > 0.0 {
            let err: f64 = biased.iter().zip(&fault_free).map(|(a, b)| (a - b).powi(2)).sum();
            trace.max_relative_bias = trace.max_relative_bias.max(err / reference);
        }

        for ((wi, mi), gi) in w.iter_mut().zip(&mut m).zip(&biased) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *wi -= cfg.lr * *mi;
        }
        let value = objective.value(&w);
        if !value.is_finite() || value > 1e6 {
            trace.diverged = true;
            break;
        }
    }
    Ok(trace)
}

/// Expected averaged squared gradient norm, estimated over `seeds` runs.
pub fn mean_averaged_grad_norm(objective: &dyn Objective, cfg: &ConvergenceConfig, seeds: u64) -> Result<f64> {
    let mut acc = 0.0;
    for s in 0..seeds {
        let run = ConvergenceConfig {
            seed: derive_seed(cfg.seed, s),
            ..*cfg
        };
        let trace = convergence_harness(objective, &run)?;
        if trace.diverged {
            return Err(Error::NonFinite {
                what: format!("convergence run (seed {s}) diverged"),
            });
        }
        acc += trace.averaged();
    }
    Ok(acc / seeds as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_noiseless_quadratic_converges_monotonically() {
        let q = Quadratic::with_condition(6, 10.0, 1);
        let cfg = ConvergenceConfig {
            ranks: 1,
            iterations: 400,
            beta1: 0.5,
            lr: 0.2,
            delta: 1.0,
            sigma: 0.0,
            seed: 0,
        };
        let trace = convergence_harness(&q, &cfg).unwrap();
        assert!(!trace.diverged);
        let tail = &trace.grad_norm_sq[50..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.grad_norm_sq[400] < 1e-6 * trace.grad_norm_sq[0]);
        assert_eq!(trace.max_relative_bias, 0.0);
    }

    #[test]
    fn bias_respects_the_bound() {
        let q = Quadratic::with_condition(8, 10.0, 2);
        let cfg = ConvergenceConfig {
            ranks: 2,
            iterations: 200,
            beta1: 0.9,
            lr: 0.05,
            delta: 0.4,
            sigma: 0.5,
            seed: 3,
        };
        let trace = convergence_harness(&q, &cfg).unwrap();
        assert!(trace.max_relative_bias <= 0.6 + 1e-12);
        assert!(trace.max_relative_bias > 0.0);
    }

    #[test]
    fn divergence_is_flagged() {
        let q = Quadratic::with_condition(3, 1.0, 4);
        let cfg = ConvergenceConfig {
            ranks: 1,
            iterations: 10_000,
            beta1: 0.0,
            lr: 5.0,
            delta: 1.0,
            sigma: 0.0,
            seed: 0,
        };
        assert!(convergence_harness(&q, &cfg).unwrap().diverged);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let f = SigmoidSum::random(5, 7, 0.1, 9);
        let w = f.initial_point();
        let g = f.gradient(&w);
        let h = 1e-6;
        for i in 0..5 {
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            let fd = (f.value(&p) - f.value(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn tuned_parameters_are_in_range() {
        let q = Quadratic::with_condition(10, 100.0, 5);
        let cfg = ConvergenceConfig::tuned(&q, 4, 1000, 0.5, 1.0, 0);
        assert!(cfg.beta1 > 1.0 - 0.5 / (24.0 - 6.0) && cfg.beta1 < 1.0);
        assert!(cfg.lr <= 1.0 / (2.0 * q.smoothness()));
    }
}
