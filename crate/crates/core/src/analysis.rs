//! Closed-form student/target gradient coefficients for plain and momentum SGD
//! with an EMA target, the literal unrolled recursion they must agree with,
//! and the first-order model of how an EMA target changes the consistency
//! gradient.
//!
//! After `t` steps started from `theta'_0 = theta_0`, both parameter vectors
//! are `theta_0 - lr * sum_k coeff_k * g_k` for the gradient `g_k` applied at
//! step `k`. The coefficients depend on when the target is refreshed
//! relative to the parameter update, see [`EmaTiming`].

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::data::Point2;
use crate::losses::consistency_l2;
use crate::net::{self, MlpParams, NetError};

/// When the EMA target is refreshed within an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaTiming {
    /// `theta'_t = gamma * theta'_{t-1} + (1 - gamma) * theta_t`: the target
    /// sees the parameters just produced. This is what the trainer does.
    AfterStep,
    /// `theta'_t = gamma * theta'_{t-1} + (1 - gamma) * theta_{t-1}`: the
    /// target lags one update behind, so the newest gradient is absent from it.
    BeforeStep,
}

/// Student and target coefficients of each past gradient at iteration `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub t: usize,
    /// Indexed by `k in 0..t`.
    pub student: Vec<f64>,
    pub target: Vec<f64>,
}

impl CoefficientTable {
    pub fn gap(&self, k: usize) -> f64 {
        self.student[k] - self.target[k]
    }

    /// `-lr * sum_k coeff_k * g_k` for student and target.
    pub fn reconstruct(&self, lr: f64, grads: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(grads.len(), self.t, "need one gradient per step");
        let dim = grads.first().map_or(0, Vec::len);
        let mut student = vec![0.0; dim];
        let mut target = vec![0.0; dim];
        for (k, g) in grads.iter().enumerate() {
            for i in 0..dim {
                student[i] -= lr * self.student[k] * g[i];
                target[i] -= lr * self.target[k] * g[i];
            }
        }
        (student, target)
    }
}

/// Plain-SGD coefficients with a lagging target: student 1, target `1 - gamma^(t-k-1)`.
pub fn sgd_coefficients(t: usize, gamma: f64) -> CoefficientTable {
    sgd_coefficients_timed(t, gamma, EmaTiming::BeforeStep)
}

pub fn sgd_coefficients_timed(t: usize, gamma: f64, timing: EmaTiming) -> CoefficientTable {
    assert!(t >= 1, "need at least one step");
    let lag = match timing {
        EmaTiming::AfterStep => 0,
        EmaTiming::BeforeStep => 1,
    };
    let target = (0..t)
        .map(|k| 1.0 - gamma.powi((t - k - lag) as i32))
        .collect();
    CoefficientTable {
        t,
        student: vec![1.0; t],
        target,
    }
}

/// Student coefficient `(1 - delta^n) / (1 - delta)` for a gradient `n` steps old.
fn momentum_student(n: usize, delta: f64) -> f64 {
    (1.0 - delta.powi(n as i32)) / (1.0 - delta)
}

/// `(1 - gamma) * sum_{j<n} gamma^(n-j-1) (1 - delta^(j+1)) / (1 - delta)`.
fn momentum_target(n: usize, delta: f64, gamma: f64) -> f64 {
    let s: f64 = (0..n)
        .map(|j| gamma.powi((n - j - 1) as i32) * momentum_student(j + 1, delta))
        .sum();
    (1.0 - gamma) * s
}

/// Momentum-SGD coefficients of gradient `k` at iteration `t`, target refreshed after each step.
pub fn momentum_coefficients(t: usize, k: usize, delta: f64, gamma: f64) -> (f64, f64) {
    momentum_coefficients_timed(t, k, delta, gamma, EmaTiming::AfterStep)
}

pub fn momentum_coefficients_timed(
    t: usize,
    k: usize,
    delta: f64,
    gamma: f64,
    timing: EmaTiming,
) -> (f64, f64) {
    assert!(k < t, "gradient index {k} must precede iteration {t}");
    let n = t - k;
    let target_age = match timing {
        EmaTiming::AfterStep => n,
        EmaTiming::BeforeStep => n - 1,
    };
    (
        momentum_student(n, delta),
        momentum_target(target_age, delta, gamma),
    )
}

pub fn momentum_table(t: usize, delta: f64, gamma: f64, timing: EmaTiming) -> CoefficientTable {
    let (student, target) = (0..t)
        .map(|k| momentum_coefficients_timed(t, k, delta, gamma, timing))
        .unzip();
    CoefficientTable { t, student, target }
}

/// How much more of gradient `k` the student has absorbed than the target.
pub fn coefficient_gap(t: usize, k: usize, delta: f64, gamma: f64) -> f64 {
    let (s, tg) = momentum_coefficients(t, k, delta, gamma);
    s - tg
}

/// Literally iterate momentum SGD and the EMA over a fixed gradient sequence.
///
/// Returns the student and target displacements from the common start.
pub fn brute_force_unroll(
    gamma: f64,
    delta: f64,
    lr: f64,
    grads: &[Vec<f64>],
    timing: EmaTiming,
) -> (Vec<f64>, Vec<f64>) {
    let dim = grads.first().map_or(0, Vec::len);
    let mut theta = vec![0.0; dim];
    let mut target = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let ema = |target: &mut [f64], theta: &[f64]| {
        for (tg, th) in target.iter_mut().zip(theta) {
            *tg = gamma * *tg + (1.0 - gamma) * th;
        }
    };
    for g in grads {
        if timing == EmaTiming::BeforeStep {
            ema(&mut target, &theta);
        }
        for i in 0..dim {
            v[i] = delta * v[i] + lr * g[i];
            theta[i] -= v[i];
        }
        if timing == EmaTiming::AfterStep {
            ema(&mut target, &theta);
        }
    }
    (theta, target)
}

/// One point of the coefficient-gap curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapPoint {
    /// Age `t - k` of the gradient.
    pub lag: usize,
    pub student: f64,
    pub target: f64,
    pub gap: f64,
}

pub fn gap_curve(max_lag: usize, delta: f64, gamma: f64) -> Vec<GapPoint> {
    (1..=max_lag)
        .map(|lag| {
            let (student, target) = momentum_coefficients(lag, 0, delta, gamma);
            GapPoint {
                lag,
                student,
                target,
                gap: student - target,
            }
        })
        .collect()
}

pub fn write_gap_curve_csv(path: &Path, curve: &[GapPoint]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "lag,student_coeff,target_coeff,gap")?;
    for p in curve {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e}",
            p.lag, p.student, p.target, p.gap
        )?;
    }
    out.flush()
}

/// Mean-Teacher minus Pi-model consistency gradient and its first-order model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientGap {
    /// Exact difference of the two L2 consistency gradients.
    pub exact: Vec<f64>,
    /// `mean_i J_s,i^T J_t,i (theta - theta')`.
    pub first_order: Vec<f64>,
}

impl GradientGap {
    pub fn residual_norm(&self) -> f64 {
        self.exact
            .iter()
            .zip(&self.first_order)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn exact_norm(&self) -> f64 {
        self.exact.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Jacobian-vector product `d p(x) / d theta . direction` for one input.
fn prob_jvp(params: &MlpParams, x: Point2, direction: &[f64]) -> Result<Vec<f64>, NetError> {
    let (logits, trace) = net::forward(params, &[x])?;
    let probs = net::softmax(&logits);
    let c = probs.ncols();
    let mut out = vec![0.0; c];
    for (cls, o) in out.iter_mut().enumerate() {
        // Softmax row Jacobian for output `cls`: p_cls * (onehot - p).
        let seed = Array2::from_shape_fn((1, c), |(_, j)| {
            let onehot = if j == cls { 1.0 } else { 0.0 };
            probs[[0, cls]] * (onehot - probs[[0, j]])
        });
        let g = net::backward(params, &trace, &seed)?;
        *o = g.as_slice().iter().zip(direction).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// Compare the exact MT-vs-Pi consistency-gradient difference with its Taylor model.
///
/// The student branch sees `student_batch`, the target branch `target_batch`
/// (the two perturbed copies of the same inputs). Pi uses `params` on the
/// target branch, MT uses `target_params`.
pub fn gradient_gap_estimate(
    params: &MlpParams,
    target_params: &MlpParams,
    student_batch: &[Point2],
    target_batch: &[Point2],
) -> Result<GradientGap, NetError> {
    if student_batch.len() != target_batch.len() {
        return Err(NetError::Shape {
            expected: (student_batch.len(), 2),
            got: (target_batch.len(), 2),
        });
    }
    if params.layer_sizes() != target_params.layer_sizes() {
        return Err(NetError::Layout);
    }
    let (z_s, trace_s) = net::forward(params, student_batch)?;
    let p_s = net::softmax(&z_s);
    let p_pi = net::predict_proba(params, target_batch)?;
    let p_mt = net::predict_proba(target_params, target_batch)?;
    let shape_err = |_| NetError::Layout;
    let g_pi = consistency_l2(&p_s, &p_pi).map_err(shape_err)?;
    let g_mt = consistency_l2(&p_s, &p_mt).map_err(shape_err)?;
    let grad_pi = net::backward(params, &trace_s, &g_pi.grad_logits)?;
    let grad_mt = net::backward(params, &trace_s, &g_mt.grad_logits)?;
    let exact = grad_mt
        .as_slice()
        .iter()
        .zip(grad_pi.as_slice())
        .map(|(a, b)| a - b)
        .collect();

    let direction: Vec<f64> = params
        .as_slice()
        .iter()
        .zip(target_params.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let b = student_batch.len();
    let c = p_s.ncols();
    // dL/dp_s rows are J_t (theta - theta') / B; map them through the student softmax.
    let mut seed = Array2::zeros((b, c));
    for (i, &x) in target_batch.iter().enumerate() {
        let v = prob_jvp(params, x, &direction)?;
        let dot: f64 = (0..c).map(|j| p_s[[i, j]] * v[j]).sum();
        for j in 0..c {
            seed[[i, j]] = p_s[[i, j]] * (v[j] - dot) / b as f64;
        }
    }
    let first_order = net::backward(params, &trace_s, &seed)?.as_slice().to_vec();
    Ok(GradientGap { exact, first_order })
}
