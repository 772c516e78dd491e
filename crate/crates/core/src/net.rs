//! Small fully connected classifier with tanh hidden units and analytic backprop.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` occupies a row-major
//! `(fan_in, fan_out)` weight block followed by its `fan_out` biases.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::Point2;
use crate::rng;

const SNAPSHOT_MAGIC: &[u8; 8] = b"CISSLMLP";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite input at row {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("layer layout mismatch")]
    Layout,
    #[error("bad snapshot: {0}")]
    Snapshot(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Offsets `(weights, biases)` of each layer in the flat vector.
fn offsets(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut off = 0;
    sizes
        .windows(2)
        .map(|w| {
            let wo = off;
            let bo = off + w[0] * w[1];
            off = bo + w[1];
            (wo, bo)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    values: Vec<f64>,
}

/// Gradient with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layer_sizes: Vec<usize>,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layer_sizes: params.layer_sizes.clone(),
            values: vec![0.0; params.values.len()],
        }
    }

    pub fn from_flat(layer_sizes: &[usize], values: Vec<f64>) -> Result<Self, NetError> {
        if values.len() != param_count(layer_sizes) {
            return Err(NetError::Layout);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Biases of layer `l`.
    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, bo) = offsets(&self.layer_sizes)[l];
        &self.values[bo..bo + self.layer_sizes[l + 1]]
    }
}

impl MlpParams {
    /// Fan-in scaled normal weights (std `1/sqrt(fan_in)`), zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2 && layer_sizes.iter().all(|&n| n > 0));
        let mut rng = rng::stream(seed, rng::Stream::Init);
        let mut values = vec![0.0; param_count(layer_sizes)];
        for (w, (wo, _)) in layer_sizes.windows(2).zip(offsets(layer_sizes)) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for v in &mut values[wo..wo + w[0] * w[1]] {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            values,
        }
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            values: vec![0.0; param_count(layer_sizes)],
        }
    }

    pub fn from_flat(layer_sizes: &[usize], values: Vec<f64>) -> Result<Self, NetError> {
        if layer_sizes.len() < 2 || values.len() != param_count(layer_sizes) {
            return Err(NetError::Layout);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (wo, bo) = offsets(&self.layer_sizes)[l];
        let (fi, fo) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = ArrayView2::from_shape((fi, fo), &self.values[wo..bo]).expect("layout");
        let b = ArrayView1::from(&self.values[bo..bo + fo]);
        (w, b)
    }

    /// Write a little-endian snapshot: magic, layer count, sizes, value count, values.
    pub fn write_snapshot(&self, path: &Path) -> Result<(), NetError> {
        let io = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(32 + 8 * self.values.len());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&(self.layer_sizes.len() as u64).to_le_bytes());
        for &n in &self.layer_sizes {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io)
    }

    pub fn read_snapshot(path: &Path) -> Result<Self, NetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| NetError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::decode_snapshot(&bytes)
    }

    pub fn decode_snapshot(bytes: &[u8]) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Snapshot(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(bad("missing magic"));
        }
        let mut pos = 8;
        let mut next_u64 = |bytes: &[u8]| -> Result<u64, NetError> {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated"))?;
            pos += 8;
            Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
        };
        let n_layers = next_u64(bytes)? as usize;
        if n_layers > 64 {
            return Err(bad("implausible layer count"));
        }
        let sizes = (0..n_layers)
            .map(|_| next_u64(bytes).map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = next_u64(bytes)? as usize;
        let body = &bytes[8 * (n_layers + 3)..];
        if body.len() != 8 * n {
            return Err(bad("value count does not match payload"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(&sizes, values)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[l]` the tanh output of hidden layer `l`.
    pub activations: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last entry equals the logits.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

pub fn points_to_matrix(batch: &[Point2]) -> Array2<f64> {
    Array2::from_shape_fn((batch.len(), 2), |(i, j)| {
        if j == 0 {
            batch[i].x
        } else {
            batch[i].y
        }
    })
}

/// Forward pass. Returns the logits (also held in the trace).
pub fn forward(params: &MlpParams, batch: &[Point2]) -> Result<(Array2<f64>, ForwardTrace), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    if let Some(i) = batch.iter().position(|p| !p.is_finite()) {
        return Err(NetError::NonFiniteInput(i));
    }
    let trace = forward_matrix(params, points_to_matrix(batch));
    Ok((trace.logits().clone(), trace))
}

pub(crate) fn forward_matrix(params: &MlpParams, input: Array2<f64>) -> ForwardTrace {
    let n_layers = params.layer_sizes.len() - 1;
    let mut activations = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    activations.push(input);
    for l in 0..n_layers {
        let (w, b) = params.layer(l);
        let z = activations[l].dot(&w) + b;
        if l + 1 < n_layers {
            activations.push(z.mapv(f64::tanh));
        }
        pre_activations.push(z);
    }
    ForwardTrace {
        activations,
        pre_activations,
    }
}

/// Gradient of `sum_ij dl_dlogits[i,j] * logits[i,j]` with respect to the parameters.
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    dl_dlogits: &Array2<f64>,
) -> Result<Gradient, NetError> {
    let logits = trace.logits();
    if dl_dlogits.dim() != logits.dim() {
        return Err(NetError::Shape {
            expected: logits.dim(),
            got: dl_dlogits.dim(),
        });
    }
    if trace.activations.len() != params.layer_sizes.len() - 1 {
        return Err(NetError::Layout);
    }
    let offs = offsets(&params.layer_sizes);
    let mut grad = Gradient::zeros_like(params);
    let mut delta = dl_dlogits.clone();
    for l in (0..offs.len()).rev() {
        let (wo, bo) = offs[l];
        let fo = params.layer_sizes[l + 1];
        let dw = trace.activations[l].t().dot(&delta);
        let db = delta.sum_axis(Axis(0));
        grad.values[wo..bo].copy_from_slice(dw.as_slice().expect("standard layout"));
        grad.values[bo..bo + fo].copy_from_slice(db.as_slice().expect("standard layout"));
        if l > 0 {
            let (w, _) = params.layer(l);
            let mut back = delta.dot(&w.t());
            back.zip_mut_with(&trace.activations[l], |d, &a| *d *= 1.0 - a * a);
            delta = back;
        }
    }
    Ok(grad)
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    out
}

/// Class probabilities for a batch.
pub fn predict_proba(params: &MlpParams, batch: &[Point2]) -> Result<Array2<f64>, NetError> {
    forward(params, batch).map(|(z, _)| softmax(&z))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Result of comparing an analytic gradient to central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `loss` at `params`.
///
/// Checks every coordinate when `max_coords` is `None`, otherwise a seeded
/// random subset of that size.
pub fn grad_check(
    params: &MlpParams,
    analytic: &Gradient,
    loss: impl Fn(&MlpParams) -> f64,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> GradCheck {
    let n = params.len();
    let coords: Vec<usize> = match max_coords {
        Some(k) if k < n => {
            let mut rng = rng::stream(seed, rng::Stream::GradCheck);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
        _ => (0..n).collect(),
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let up = loss(&probe);
        probe.values[i] = orig - eps;
        let down = loss(&probe);
        probe.values[i] = orig;
        let cd = (up - down) / (2.0 * eps);
        let a = analytic.values[i];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    GradCheck {
        max_rel_error: worst,
        checked: coords.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Vec<Point2> {
        vec![
            Point2::new(0.3, -0.7),
            Point2::new(-1.1, 0.4),
            Point2::new(0.9, 0.9),
        ]
    }

    #[test]
    fn param_count_for_default_net() {
        let p = MlpParams::init(&[2, 64, 64, 4], 0);
        assert_eq!(p.len(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4);
        assert_eq!(p.len(), 4612);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = MlpParams::init(&[2, 8, 8, 3], 11);
        assert_eq!(a, MlpParams::init(&[2, 8, 8, 3], 11));
        assert_ne!(a, MlpParams::init(&[2, 8, 8, 3], 12));
        for (l, (_, bo)) in offsets(a.layer_sizes()).into_iter().enumerate() {
            let fo = a.layer_sizes()[l + 1];
            assert!(a.as_slice()[bo..bo + fo].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let p = MlpParams::zeros(&[2, 5, 5, 4]);
        let probs = predict_proba(&p, &batch()).unwrap();
        assert!(probs.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn duplicated_row_gives_duplicated_logits() {
        let p = MlpParams::init(&[2, 6, 6, 3], 1);
        let mut b = batch();
        b.push(b[1]);
        let (z, _) = forward(&p, &b).unwrap();
        assert_eq!(z.row(1), z.row(3));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = MlpParams::init(&[2, 4, 2], 0);
        assert!(matches!(forward(&p, &[]), Err(NetError::EmptyBatch)));
        assert!(matches!(
            forward(&p, &[Point2::new(0.0, f64::NAN)]),
            Err(NetError::NonFiniteInput(0))
        ));
    }

    #[test]
    fn backward_of_zero_is_zero_and_checks_shape() {
        let p = MlpParams::init(&[2, 6, 6, 3], 1);
        let (z, tr) = forward(&p, &batch()).unwrap();
        let g = backward(&p, &tr, &Array2::zeros(z.dim())).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            backward(&p, &tr, &Array2::zeros((2, 3))),
            Err(NetError::Shape { .. })
        ));
    }

    #[test]
    fn sum_of_logits_bias_gradient_is_batch_size() {
        let p = MlpParams::init(&[2, 6, 6, 3], 4);
        let b = batch();
        let (z, tr) = forward(&p, &b).unwrap();
        let g = backward(&p, &tr, &Array2::ones(z.dim())).unwrap();
        assert!(g.bias(2).iter().all(|&v| v == b.len() as f64));
    }

    #[test]
    fn snapshot_round_trip() {
        let p = MlpParams::init(&[2, 3, 2], 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.write_snapshot(&path).unwrap();
        assert_eq!(MlpParams::read_snapshot(&path).unwrap(), p);
        assert!(MlpParams::decode_snapshot(b"nope").is_err());
    }

    #[test]
    fn grad_check_on_quadratic() {
        let p = MlpParams::init(&[2, 5, 3], 2);
        let analytic = Gradient::from_flat(p.layer_sizes(), p.as_slice().to_vec()).unwrap();
        let r = grad_check(
            &p,
            &analytic,
            |q| 0.5 * q.as_slice().iter().map(|v| v * v).sum::<f64>(),
            1e-4,
            None,
            0,
        );
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, p.len());
    }
}
