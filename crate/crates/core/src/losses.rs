//! Supervised losses with class reweighting, L2 consistency, and suppressed consistency.
//!
//! All losses take softmax probabilities and return the gradient with respect
//! to the pre-softmax logits, so the result feeds straight into
//! [`crate::net::backward`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClassCounts;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("counts cover {got} classes, probabilities {expected}")]
    Classes { expected: usize, got: usize },
}

/// Class-imbalance handling for the supervised term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum ReweightSpec {
    /// Plain cross-entropy.
    #[default]
    Ce,
    /// Weights inversely proportional to class frequency.
    In,
    /// Focal modulation `(1 - p_t)^gamma`.
    Focal { gamma: f64 },
    /// Inverse effective number of samples `(1 - beta^n) / (1 - beta)`.
    Cb { beta: f64 },
}


/// Shape of the suppression function `g(N_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum SclShape {
    /// `beta^(1 - N_c / N_max)`.
    Exponential { beta: f64 },
    /// `N_c / N_max`.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
    /// Samples whose labeled-class probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Effective number of samples for a class of size `n`.
pub fn effective_number(n: usize, beta: f64) -> f64 {
    (1.0 - beta.powi(n as i32)) / (1.0 - beta)
}

/// Per-class weights normalized to sum to the class count.
pub fn class_weights(spec: &ReweightSpec, counts: &ClassCounts) -> Vec<f64> {
    let c = counts.num_classes();
    let raw: Vec<f64> = match *spec {
        ReweightSpec::Ce | ReweightSpec::Focal { .. } => return vec![1.0; c],
        ReweightSpec::In => counts.as_slice().iter().map(|&n| 1.0 / n as f64).collect(),
        ReweightSpec::Cb { beta } => counts
            .as_slice()
            .iter()
            .map(|&n| 1.0 / effective_number(n, beta))
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w * c as f64 / total).collect()
}

/// Push `dl/dp` through the softmax Jacobian of one row.
fn softmax_backprop_row(p: ndarray::ArrayView1<f64>, dl_dp: &[f64], out: ndarray::ArrayViewMut1<f64>) {
    let dot: f64 = p.iter().zip(dl_dp).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in out.into_iter().zip(p.iter()).zip(dl_dp) {
        *o = pj * (gj - dot);
    }
}

/// Batch-mean weighted negative log-likelihood (or focal loss).
pub fn supervised_loss(
    probs: &Array2<f64>,
    labels: &[usize],
    spec: &ReweightSpec,
    counts: &ClassCounts,
) -> Result<LossOutput, LossError> {
    let (b, c) = probs.dim();
    if labels.len() != b {
        return Err(LossError::Shape((b, c), (labels.len(), c)));
    }
    if counts.num_classes() != c {
        return Err(LossError::Classes {
            expected: c,
            got: counts.num_classes(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(LossError::Label { label, classes: c });
    }
    let weights = class_weights(spec, counts);
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    let mut clamped = 0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        let log_p = p.max(PROB_FLOOR).ln();
        // `a` is p * dl/dp; the logit gradient is a * (onehot_y - p).
        let (loss, a) = match *spec {
            ReweightSpec::Focal { gamma } => {
                let q = 1.0 - p;
                let loss = -q.powf(gamma) * log_p;
                let a = if gamma == 0.0 {
                    -1.0
                } else {
                    gamma * q.powf(gamma - 1.0) * p * log_p - q.powf(gamma)
                };
                (loss, if a.is_finite() { a } else { 0.0 })
            }
            _ => (-log_p, -1.0),
        };
        let w = weights[y] * inv_b;
        total += w * loss;
        for j in 0..c {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = w * a * (onehot - probs[[i, j]]);
        }
    }
    Ok(LossOutput {
        loss: total,
        grad_logits: grad,
        clamped,
    })
}

/// Shared body of the L2 and suppressed consistency losses.
fn weighted_consistency(
    student: &Array2<f64>,
    target: &Array2<f64>,
    weights: Option<&[f64]>,
) -> Result<LossOutput, LossError> {
    if student.dim() != target.dim() {
        return Err(LossError::Shape(student.dim(), target.dim()));
    }
    let (b, c) = student.dim();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    let mut diff = vec![0.0; c];
    for i in 0..b {
        let w = weights.map_or(1.0, |w| w[i]);
        let mut sq = 0.0;
        for j in 0..c {
            let d = student[[i, j]] - target[[i, j]];
            sq += d * d;
            diff[j] = w * inv_b * d;
        }
        total += w * 0.5 * sq;
        softmax_backprop_row(student.row(i), &diff, grad.row_mut(i));
    }
    Ok(LossOutput {
        loss: total * inv_b,
        grad_logits: grad,
        clamped: 0,
    })
}

/// Batch mean of `0.5 * ||student - target||^2`; the target is a constant.
pub fn consistency_l2(student: &Array2<f64>, target: &Array2<f64>) -> Result<LossOutput, LossError> {
    weighted_consistency(student, target, None)
}

/// Suppression weight for a sample predicted as `class`.
pub fn scl_weight(counts: &ClassCounts, class: usize, shape: &SclShape) -> f64 {
    let ratio = counts.get(class) as f64 / counts.max() as f64;
    match *shape {
        SclShape::Exponential { beta } => beta.powf(1.0 - ratio),
        SclShape::Linear => ratio,
    }
}

/// Consistency loss with each sample scaled by the suppression weight of its predicted class.
pub fn scl_consistency(
    student: &Array2<f64>,
    target: &Array2<f64>,
    predictions: &[usize],
    counts: &ClassCounts,
    shape: &SclShape,
) -> Result<LossOutput, LossError> {
    if predictions.len() != student.nrows() {
        return Err(LossError::Shape(student.dim(), (predictions.len(), student.ncols())));
    }
    if counts.num_classes() != student.ncols() {
        return Err(LossError::Classes {
            expected: student.ncols(),
            got: counts.num_classes(),
        });
    }
    if let Some(&label) = predictions.iter().find(|&&l| l >= counts.num_classes()) {
        return Err(LossError::Label {
            label,
            classes: counts.num_classes(),
        });
    }
    let w: Vec<f64> = predictions
        .iter()
        .map(|&c| scl_weight(counts, c, shape))
        .collect();
    weighted_consistency(student, target, Some(&w))
}

/// Cross-entropy against hard pseudo-labels for rows whose top probability
/// reaches `threshold`, averaged over the whole batch.
pub fn pseudo_label_loss(probs: &Array2<f64>, threshold: f64) -> (LossOutput, usize) {
    let (b, c) = probs.dim();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    let mut selected = 0;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let (y, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        if p < threshold {
            continue;
        }
        selected += 1;
        total -= inv_b * p.max(PROB_FLOOR).ln();
        for j in 0..c {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = inv_b * (row[j] - onehot);
        }
    }
    (
        LossOutput {
            loss: total,
            grad_logits: grad,
            clamped: 0,
        },
        selected,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn counts(v: &[usize]) -> ClassCounts {
        ClassCounts::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ce_one_hot_is_zero_and_uniform_is_ln_c() {
        let c = counts(&[1, 1, 1, 1]);
        let p = array![[0.0, 1.0, 0.0, 0.0]];
        assert_eq!(supervised_loss(&p, &[1], &ReweightSpec::Ce, &c).unwrap().loss, 0.0);
        let u = Array2::from_elem((3, 4), 0.25);
        let l = supervised_loss(&u, &[0, 2, 3], &ReweightSpec::Ce, &c).unwrap().loss;
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_single_sample_value() {
        let p = array![[0.5, 0.5]];
        let l = supervised_loss(&p, &[0], &ReweightSpec::Focal { gamma: 2.0 }, &counts(&[3, 1]))
            .unwrap()
            .loss;
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let p = array![[1.0, 0.0]];
        let out = supervised_loss(&p, &[1], &ReweightSpec::Ce, &counts(&[1, 1])).unwrap();
        assert_eq!(out.clamped, 1);
        assert!((out.loss + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_labels_rejected() {
        let p = array![[0.5, 0.5]];
        assert_eq!(
            supervised_loss(&p, &[2], &ReweightSpec::Ce, &counts(&[1, 1])),
            Err(LossError::Label { label: 2, classes: 2 })
        );
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = class_weights(&ReweightSpec::In, &counts(&[10, 2]));
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn effective_number_values() {
        assert_eq!(effective_number(1, 0.3), 1.0);
        assert!((effective_number(1000, 0.999) - 632.3045752290363).abs() < 1e-9);
    }

    #[test]
    fn in_with_balanced_counts_equals_ce() {
        let p = array![[0.2, 0.7, 0.1], [0.6, 0.3, 0.1]];
        let c = counts(&[4, 4, 4]);
        let a = supervised_loss(&p, &[1, 2], &ReweightSpec::In, &c).unwrap();
        let b = supervised_loss(&p, &[1, 2], &ReweightSpec::Ce, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consistency_values() {
        let s = array![[0.5, 0.5]];
        let t = array![[1.0, 0.0]];
        assert_eq!(consistency_l2(&s, &t).unwrap().loss, 0.25);
        let same = consistency_l2(&s, &s).unwrap();
        assert_eq!(same.loss, 0.0);
        assert!(same.grad_logits.iter().all(|&g| g == 0.0));
        let s2 = array![[0.5, 0.5], [0.5, 0.5]];
        let t2 = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(consistency_l2(&s2, &t2).unwrap().loss, 0.25);
        assert!(consistency_l2(&s, &s2).is_err());
    }

    #[test]
    fn scl_weights() {
        let exp = SclShape::Exponential { beta: 0.5 };
        assert_eq!(scl_weight(&counts(&[10, 10]), 0, &exp), 1.0);
        assert!((scl_weight(&counts(&[10, 5]), 1, &exp) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(scl_weight(&counts(&[10, 2]), 1, &SclShape::Linear), 0.2);
        assert!((scl_weight(&counts(&[10, 2]), 1, &exp) - 0.57435).abs() < 1e-5);
    }

    #[test]
    fn scl_per_sample_recomposition() {
        let s = array![[0.7, 0.3], [0.2, 0.8], [0.9, 0.1], [0.4, 0.6]];
        let t = array![[0.5, 0.5], [0.6, 0.4], [0.8, 0.2], [0.1, 0.9]];
        let preds = [0, 1, 0, 1];
        let c = counts(&[10, 2]);
        let out = scl_consistency(&s, &t, &preds, &c, &SclShape::Exponential { beta: 0.5 }).unwrap();
        let w = [1.0, 0.5f64.powf(0.8), 1.0, 0.5f64.powf(0.8)];
        let expected: f64 = (0..4)
            .map(|i| {
                let d0 = s[[i, 0]] - t[[i, 0]];
                let d1 = s[[i, 1]] - t[[i, 1]];
                w[i] * 0.5 * (d0 * d0 + d1 * d1)
            })
            .sum::<f64>()
            / 4.0;
        assert!((out.loss - expected).abs() < 1e-15);
    }

    #[test]
    fn scl_is_l2_when_balanced_or_major() {
        let s = array![[0.7, 0.3], [0.2, 0.8]];
        let t = array![[0.5, 0.5], [0.6, 0.4]];
        let l2 = consistency_l2(&s, &t).unwrap();
        for shape in [SclShape::Linear, SclShape::Exponential { beta: 0.25 }] {
            let bal = scl_consistency(&s, &t, &[0, 1], &counts(&[7, 7]), &shape).unwrap();
            assert_eq!(bal, l2);
        }
        let major = scl_consistency(
            &s,
            &t,
            &[0, 0],
            &counts(&[10, 2]),
            &SclShape::Exponential { beta: 0.5 },
        )
        .unwrap();
        assert_eq!(major, l2);
    }

    #[test]
    fn pseudo_label_selects_confident_rows() {
        let p = array![[0.97, 0.03], [0.6, 0.4], [0.01, 0.99]];
        let (out, n) = pseudo_label_loss(&p, 0.95);
        assert_eq!(n, 2);
        let expected = -(0.97f64.ln() + 0.99f64.ln()) / 3.0;
        assert!((out.loss - expected).abs() < 1e-15);
        assert!(out.grad_logits.row(1).iter().all(|&g| g == 0.0));
        let (none, n) = pseudo_label_loss(&p, 1.0);
        assert_eq!((none.loss, n), (0.0, 0));
    }
}
