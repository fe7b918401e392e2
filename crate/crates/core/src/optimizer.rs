//! AdamW over the steering coefficients.
//!
//! ```text
//! m ← β₁m + (1−β₁)g
//! v ← β₂v + (1−β₂)g²
//! m̂ = m / (1−β₁ᵗ),  v̂ = v / (1−β₂ᵗ)
//! γ ← γ − lr·m̂/(√v̂ + ε) − lr·wd·γ
//! ```
//!
//! The first step runs at `lr`; every later step at `lr · lr_decay_factor`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates per episode; 0 evaluates the unadapted prototypes.
    pub steps: usize,
    /// Applied once, to every step after the first.
    pub lr_decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 1,
            lr_decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.lr_decay_factor]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(StsError::param("optimizer", "all fields must be finite"));
        }
        if self.lr <= 0.0 {
            return Err(StsError::param("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(StsError::param("beta1", format!("{} is outside [0, 1)", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(StsError::param("beta2", format!("{} is outside [0, 1)", self.beta2)));
        }
        if self.eps <= 0.0 {
            return Err(StsError::param("eps", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(StsError::param("weight_decay", "must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(StsError::param("lr_decay_factor", format!("{} is outside (0, 1]", self.lr_decay_factor)));
        }
        Ok(())
    }

    /// Learning rate for the update that follows `t` completed steps.
    pub fn scheduled_lr(&self, t: u64) -> f64 {
        if t == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        OptimizerState {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// One AdamW update of `gamma` in place.
pub fn step(
    state: &mut OptimizerState,
    gamma: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    cfg: &OptimizerConfig,
    effective_lr: f64,
) -> Result<()> {
    if grad.shape() != gamma.shape() || state.m.shape() != gamma.shape() {
        return Err(StsError::InvalidInput(format!(
            "gradient {:?}, coefficients {:?} and optimizer state {:?} disagree",
            grad.shape(),
            gamma.shape(),
            state.m.shape()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(StsError::Numerical("non-finite gradient passed to the optimizer".into()));
    }

    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    for i in 0..gamma.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        let old = gamma[i];
        gamma[i] = old - effective_lr * m_hat / (v_hat.sqrt() + cfg.eps) - effective_lr * cfg.weight_decay * old;
    }
    Ok(())
}
