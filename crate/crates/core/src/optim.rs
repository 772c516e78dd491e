//! SGD with momentum, EMA target tracking, and training schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Gradient, MlpParams};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("parameter/gradient layout mismatch")]
    Layout,
}

/// Momentum SGD: `v <- momentum * v + lr * g`, `theta <- theta - v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    /// L2 penalty coefficient folded into the gradient.
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(params: &MlpParams, lr: f64, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; params.len()],
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grad: &Gradient) -> Result<(), OptimError> {
        if grad.layer_sizes() != params.layer_sizes() || self.velocity.len() != params.len() {
            return Err(OptimError::Layout);
        }
        if !grad.is_finite() {
            return Err(OptimError::NonFiniteGradient);
        }
        let wd = self.weight_decay;
        for ((theta, v), &g) in params
            .as_mut_slice()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grad.as_slice())
        {
            let g = if wd != 0.0 { g + wd * *theta } else { g };
            *v = self.momentum * *v + self.lr * g;
            *theta -= *v;
        }
        Ok(())
    }
}

/// Exponential moving average of student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub target: MlpParams,
    pub gamma: f64,
}

impl EmaState {
    pub fn new(student: &MlpParams, gamma: f64) -> Self {
        Self {
            target: student.clone(),
            gamma,
        }
    }

    /// `target <- gamma * target + (1 - gamma) * student`.
    pub fn update(&mut self, student: &MlpParams) -> Result<(), OptimError> {
        if student.layer_sizes() != self.target.layer_sizes() {
            return Err(OptimError::Layout);
        }
        let g = self.gamma;
        for (t, &s) in self.target.as_mut_slice().iter_mut().zip(student.as_slice()) {
            *t = g * *t + (1.0 - g) * s;
        }
        Ok(())
    }
}

/// Iteration-indexed learning rate and consistency weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_iters: usize,
    pub rampup_iters: usize,
    pub w_max: f64,
    pub base_lr: f64,
    /// `(iteration, multiplier)`, sorted by iteration.
    pub lr_decay_points: Vec<(usize, f64)>,
}

impl Schedule {
    /// Gaussian ramp `w_max * exp(-5 (1 - min(t / T, 1))^2)`.
    pub fn rampup_weight(&self, t: usize) -> f64 {
        if self.rampup_iters == 0 || t >= self.rampup_iters {
            return self.w_max;
        }
        let phase = 1.0 - t as f64 / self.rampup_iters as f64;
        self.w_max * (-5.0 * phase * phase).exp()
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr_decay_points
            .iter()
            .filter(|(at, _)| *at <= t)
            .fold(self.base_lr, |lr, (_, m)| lr * m)
    }
}
