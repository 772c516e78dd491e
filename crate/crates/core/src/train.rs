//! One training loop for supervised, Pi-model, Mean Teacher, Pseudo-Label and
//! Mean Teacher with suppressed consistency.
//!
//! Every variant consumes the random streams identically (labeled batch,
//! unlabeled batch, three noise draws per step) so runs that differ only in
//! algorithm see the same batches.

use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CisslSplit, Dataset2D, Point2};
use crate::losses::{self, LossError, ReweightSpec, SclShape};
use crate::net::{self, MlpParams, NetError};
use crate::optim::{EmaState, OptimError, Schedule, SgdState};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}")]
    Diverged {
        iteration: usize,
        snapshot: Box<MlpParams>,
        history: Vec<HistoryRow>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Which prediction picks the suppression class for each unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgmaxSource {
    #[default]
    Student,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    Supervised,
    PiModel,
    MeanTeacher,
    PseudoLabel { threshold: f64 },
    MeanTeacherScl { shape: SclShape, argmax: ArgmaxSource },
}

impl Algorithm {
    pub fn uses_ema(&self) -> bool {
        matches!(
            self,
            Algorithm::MeanTeacher | Algorithm::MeanTeacherScl { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    pub reweight: ReweightSpec,
}

impl AlgorithmSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            reweight: ReweightSpec::Ce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Std of the Gaussian input perturbation.
    pub noise_std: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub sampling: Sampling,
    /// Validation is evaluated every this many iterations and at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                total_iters: 5000,
                rampup_iters: 2000,
                w_max: 8.0,
                base_lr: 0.1,
                lr_decay_points: vec![(4000, 0.2)],
            },
            labeled_batch: 32,
            unlabeled_batch: 32,
            noise_std: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ema_decay: 0.95,
            hidden_width: 64,
            hidden_layers: 2,
            sampling: Sampling::WithReplacement,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn layer_sizes(&self, num_classes: usize) -> Vec<usize> {
        let mut sizes = vec![2];
        sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        sizes.push(num_classes);
        sizes
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    /// Completed optimizer steps.
    pub iteration: usize,
    pub lr: f64,
    pub w: f64,
    /// Mean supervised loss since the previous row.
    pub sup_loss: f64,
    /// Mean unweighted consistency (or pseudo-label) loss since the previous row.
    pub con_loss: f64,
    pub val_errors: Vec<Option<f64>>,
    /// Validation errors of the EMA target, for variants that keep one.
    pub ema_val_errors: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub student: MlpParams,
    pub target: Option<MlpParams>,
    pub history: Vec<HistoryRow>,
    pub wall_seconds: f64,
}

impl RunResult {
    pub fn final_errors(&self) -> &[Option<f64>] {
        &self.history.last().expect("at least one eval").val_errors
    }

    pub fn final_ema_errors(&self) -> Option<&[Option<f64>]> {
        self.history.last()?.ema_val_errors.as_deref()
    }
}

/// Uniform minibatch sampler over the labeled and unlabeled partitions.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    sampling: Sampling,
}

/// A labeled minibatch with its labels, and an unlabeled minibatch without.
pub type Batches = (Vec<Point2>, Vec<usize>, Vec<Point2>);

impl BatchSampler {
    pub fn new(seed: u64, sampling: Sampling) -> Self {
        Self {
            rng: rng::stream(seed, rng::Stream::Batch),
            sampling,
        }
    }

    fn indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if n == 0 {
            return Vec::new();
        }
        match self.sampling {
            Sampling::WithReplacement => (0..k).map(|_| self.rng.gen_range(0..n)).collect(),
            Sampling::WithoutReplacement => index::sample(&mut self.rng, n, k.min(n)).into_vec(),
        }
    }

    pub fn sample(&mut self, split: &CisslSplit, labeled_batch: usize, unlabeled_batch: usize) -> Batches {
        let lab = &split.labeled;
        let li = self.indices(lab.len(), labeled_batch);
        let unl = split.unlabeled_points();
        let ui = self.indices(unl.len(), unlabeled_batch);
        (
            li.iter().map(|&i| lab.points()[i]).collect(),
            li.iter().map(|&i| lab.labels()[i]).collect(),
            ui.iter().map(|&i| unl[i]).collect(),
        )
    }
}

/// Add isotropic Gaussian noise to every point.
pub fn perturb(batch: &[Point2], noise_std: f64, rng: &mut impl Rng) -> Vec<Point2> {
    if noise_std == 0.0 {
        return batch.to_vec();
    }
    batch
        .iter()
        .map(|p| {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            Point2::new(p.x + noise_std * dx, p.y + noise_std * dy)
        })
        .collect()
}

/// Per-class error rate; `None` for classes absent from `dataset`.
pub fn evaluate(params: &MlpParams, dataset: &Dataset2D) -> Result<Vec<Option<f64>>, NetError> {
    let c = dataset.num_classes();
    let mut wrong = vec![0usize; c];
    let mut total = vec![0usize; c];
    if dataset.is_empty() {
        return Ok(vec![None; c]);
    }
    for (chunk_pts, chunk_lab) in dataset.points().chunks(1024).zip(dataset.labels().chunks(1024)) {
        let (logits, _) = net::forward(params, chunk_pts)?;
        for (pred, &y) in net::argmax_rows(&logits).into_iter().zip(chunk_lab) {
            total[y] += 1;
            if pred != y {
                wrong[y] += 1;
            }
        }
    }
    Ok(wrong
        .iter()
        .zip(&total)
        .map(|(&w, &n)| (n > 0).then(|| w as f64 / n as f64))
        .collect())
}

fn validate(split: &CisslSplit, config: &TrainConfig) -> Result<(), TrainError> {
    let bad = |m: &str| Err(TrainError::Config(m.to_string()));
    if split.labeled.is_empty() {
        return bad("labeled partition is empty");
    }
    if config.labeled_batch == 0 {
        return bad("labeled_batch must be positive");
    }
    if config.hidden_width == 0 || config.hidden_layers == 0 {
        return bad("network needs at least one hidden unit and layer");
    }
    if config.eval_every == 0 {
        return bad("eval_every must be positive");
    }
    if !(0.0..=1.0).contains(&config.ema_decay) {
        return bad("ema_decay must lie in [0, 1]");
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return bad("momentum must lie in [0, 1)");
    }
    Ok(())
}

/// Called after every optimizer step with the completed step count, the
/// student and (for EMA variants) the target.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &MlpParams, Option<&MlpParams>);

pub fn train(split: &CisslSplit, algo: &AlgorithmSpec, config: &TrainConfig) -> Result<RunResult, TrainError> {
    train_observed(split, algo, config, &mut |_, _, _| {})
}

pub fn train_observed(
    split: &CisslSplit,
    algo: &AlgorithmSpec,
    config: &TrainConfig,
    observer: StepObserver<'_>,
) -> Result<RunResult, TrainError> {
    validate(split, config)?;
    let start = Instant::now();
    let c = split.num_classes();
    let sched = &config.schedule;
    let mut student = MlpParams::init(&config.layer_sizes(c), config.seed);
    let mut sgd = SgdState::new(&student, sched.base_lr, config.momentum);
    sgd.weight_decay = config.weight_decay;
    let mut ema = algo
        .algorithm
        .uses_ema()
        .then(|| EmaState::new(&student, config.ema_decay));
    let mut sampler = BatchSampler::new(config.seed, config.sampling);
    let mut noise_rng = rng::stream(config.seed, rng::Stream::Noise);

    let mut history = Vec::new();
    let (mut sup_acc, mut con_acc, mut acc_n) = (0.0, 0.0, 0usize);

    for t in 0..sched.total_iters {
        let lr = sched.lr_at(t);
        let w = sched.rampup_weight(t);
        sgd.lr = lr;

        let (lab_x, lab_y, unl_x) = sampler.sample(split, config.labeled_batch, config.unlabeled_batch);
        let lab_in = perturb(&lab_x, config.noise_std, &mut noise_rng);
        let unl_student = perturb(&unl_x, config.noise_std, &mut noise_rng);
        let unl_target = perturb(&unl_x, config.noise_std, &mut noise_rng);
        let bl = lab_in.len();
        let bu = unl_student.len();

        let mut input = lab_in;
        input.extend_from_slice(&unl_student);
        let (logits, trace) = net::forward(&student, &input)?;
        let probs = net::softmax(&logits);
        let p_lab = probs.slice(s![..bl, ..]).to_owned();
        let sup = losses::supervised_loss(&p_lab, &lab_y, &algo.reweight, &split.labeled_counts)?;

        let mut grad_logits = Array2::zeros((bl + bu, c));
        grad_logits.slice_mut(s![..bl, ..]).assign(&sup.grad_logits);
        let mut con_loss = 0.0;
        if bu > 0 {
            let p_unl = probs.slice(s![bl.., ..]).to_owned();
            let con = match algo.algorithm {
                Algorithm::Supervised => None,
                Algorithm::PiModel => {
                    let target = net::predict_proba(&student, &unl_target)?;
                    Some(losses::consistency_l2(&p_unl, &target)?)
                }
                Algorithm::MeanTeacher => {
                    let ema = ema.as_ref().expect("MT keeps a target");
                    let target = net::predict_proba(&ema.target, &unl_target)?;
                    Some(losses::consistency_l2(&p_unl, &target)?)
                }
                Algorithm::MeanTeacherScl { shape, argmax } => {
                    let ema = ema.as_ref().expect("MT keeps a target");
                    let target = net::predict_proba(&ema.target, &unl_target)?;
                    let preds = match argmax {
                        ArgmaxSource::Student => net::argmax_rows(&p_unl),
                        ArgmaxSource::Target => net::argmax_rows(&target),
                    };
                    Some(losses::scl_consistency(
                        &p_unl,
                        &target,
                        &preds,
                        &split.labeled_counts,
                        &shape,
                    )?)
                }
                Algorithm::PseudoLabel { threshold } => {
                    Some(losses::pseudo_label_loss(&p_unl, threshold).0)
                }
            };
            if let Some(con) = con {
                con_loss = con.loss;
                if w != 0.0 {
                    grad_logits
                        .slice_mut(s![bl.., ..])
                        .assign(&(con.grad_logits * w));
                }
            }
        }

        if !(sup.loss.is_finite() && con_loss.is_finite()) {
            return Err(TrainError::Diverged {
                iteration: t,
                snapshot: Box::new(student),
                history,
            });
        }
        sup_acc += sup.loss;
        con_acc += con_loss;
        acc_n += 1;

        let grad = net::backward(&student, &trace, &grad_logits)?;
        if !grad.is_finite() {
            return Err(TrainError::Diverged {
                iteration: t,
                snapshot: Box::new(student),
                history,
            });
        }
        sgd.step(&mut student, &grad)?;
        if let Some(ema) = ema.as_mut() {
            ema.update(&student)?;
        }
        let done = t + 1;
        observer(done, &student, ema.as_ref().map(|e| &e.target));

        if done % config.eval_every == 0 || done == sched.total_iters {
            history.push(HistoryRow {
                iteration: done,
                lr,
                w,
                sup_loss: sup_acc / acc_n as f64,
                con_loss: con_acc / acc_n as f64,
                val_errors: evaluate(&student, &split.validation)?,
                ema_val_errors: ema
                    .as_ref()
                    .map(|e| evaluate(&e.target, &split.validation))
                    .transpose()?,
            });
            (sup_acc, con_acc, acc_n) = (0.0, 0.0, 0);
        }
    }
    if history.is_empty() {
        history.push(HistoryRow {
            iteration: 0,
            lr: sched.lr_at(0),
            w: sched.rampup_weight(0),
            sup_loss: 0.0,
            con_loss: 0.0,
            val_errors: evaluate(&student, &split.validation)?,
            ema_val_errors: ema
                .as_ref()
                .map(|e| evaluate(&e.target, &split.validation))
                .transpose()?,
        });
    }
    Ok(RunResult {
        student,
        target: ema.map(|e| e.target),
        history,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Write a run history as CSV: `iteration,lr,w,sup_loss,con_loss,val_err_<c>...`
/// followed by `ema_val_err_<c>` columns when a target exists.
pub fn write_history_csv(path: &std::path::Path, rows: &[HistoryRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(history_csv(rows).as_bytes())?;
    out.flush()
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let Some(first) = rows.first() else {
        return s;
    };
    let c = first.val_errors.len();
    s.push_str("iteration,lr,w,sup_loss,con_loss");
    for k in 0..c {
        let _ = write!(s, ",val_err_{k}");
    }
    if first.ema_val_errors.is_some() {
        for k in 0..c {
            let _ = write!(s, ",ema_val_err_{k}");
        }
    }
    s.push('\n');
    let cell = |v: &Option<f64>| v.map_or(String::new(), |e| format!("{e:.16e}"));
    for r in rows {
        let _ = write!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iteration, r.lr, r.w, r.sup_loss, r.con_loss
        );
        for e in &r.val_errors {
            let _ = write!(s, ",{}", cell(e));
        }
        if let Some(ema) = &r.ema_val_errors {
            for e in ema {
                let _ = write!(s, ",{}", cell(e));
            }
        }
        s.push('\n');
    }
    s
}
