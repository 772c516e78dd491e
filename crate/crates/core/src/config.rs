//! Campaign configuration: TOML schema, defaults, and validation.
//!
//! Unknown keys are rejected and every range violation is reported with the
//! path of the offending field, all in one pass.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{MoonGeometry, SpinGeometry, UnlabeledType};
use crate::losses::{ReweightSpec, SclShape};
use crate::optim::Schedule;
use crate::report::GroupMode;
use crate::train::{Algorithm, AlgorithmSpec, ArgmaxSource, Sampling, TrainConfig};

/// One validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// All failures found in a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    FourSpins,
}

impl DatasetKind {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetKind::TwoMoons => 2,
            DatasetKind::FourSpins => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub kind: DatasetKind,
    /// Std of the Gaussian noise around the class loci.
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moon_geometry: Option<MoonGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin_geometry: Option<SpinGeometry>,
    /// Labeled samples of the most frequent class.
    pub labeled_max: usize,
    /// Labeled imbalance factor.
    pub rho_l: f64,
    pub unlabeled_type: UnlabeledType,
    /// Unlabeled samples of the most frequent class.
    pub unlabeled_max: usize,
    pub val_per_class: usize,
}

impl DatasetConfig {
    /// Per-class pool size that always covers the split demands.
    pub fn pool_per_class(&self) -> usize {
        self.labeled_max + self.unlabeled_max + self.val_per_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Supervised,
    PiModel,
    MeanTeacher,
    PseudoLabel,
    MeanTeacherScl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub name: String,
    pub kind: AlgorithmKind,
    /// Overrides `training.w_max` for this algorithm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_max: Option<f64>,
    #[serde(default)]
    pub reweight: ReweightSpec,
    /// Pseudo-label confidence threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scl: Option<SclShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax: Option<ArgmaxSource>,
}

impl AlgorithmConfig {
    pub fn spec(&self) -> AlgorithmSpec {
        let algorithm = match self.kind {
            AlgorithmKind::Supervised => Algorithm::Supervised,
            AlgorithmKind::PiModel => Algorithm::PiModel,
            AlgorithmKind::MeanTeacher => Algorithm::MeanTeacher,
            AlgorithmKind::PseudoLabel => Algorithm::PseudoLabel {
                threshold: self.threshold.unwrap_or(0.95),
            },
            AlgorithmKind::MeanTeacherScl => Algorithm::MeanTeacherScl {
                shape: self.scl.unwrap_or(SclShape::Exponential { beta: 0.5 }),
                argmax: self.argmax.unwrap_or_default(),
            },
        };
        AlgorithmSpec {
            algorithm,
            reweight: self.reweight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub rampup_iters: usize,
    pub w_max: f64,
    pub lr: f64,
    /// `[iteration, multiplier]` pairs.
    pub lr_decay: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub input_noise: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub eval_every: usize,
    pub sampling: Sampling,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.schedule.total_iters,
            rampup_iters: t.schedule.rampup_iters,
            w_max: t.schedule.w_max,
            lr: t.schedule.base_lr,
            lr_decay: t.schedule.lr_decay_points,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            labeled_batch: t.labeled_batch,
            unlabeled_batch: t.unlabeled_batch,
            input_noise: t.noise_std,
            hidden_width: t.hidden_width,
            hidden_layers: t.hidden_layers,
            eval_every: t.eval_every,
            sampling: t.sampling,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self, w_max: Option<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule: Schedule {
                total_iters: self.iterations,
                rampup_iters: self.rampup_iters,
                w_max: w_max.unwrap_or(self.w_max),
                base_lr: self.lr,
                lr_decay_points: self.lr_decay.clone(),
            },
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            noise_std: self.input_noise,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            sampling: self.sampling,
            eval_every: self.eval_every,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub group_mode: GroupMode,
    /// Emit decision-boundary grids for every run.
    pub grids: bool,
    pub grid_resolution: usize,
    /// Fraction of the data extent added on each side of the grid box.
    pub grid_margin: f64,
    pub snapshots: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            group_mode: GroupMode::Single,
            grids: false,
            grid_resolution: 200,
            grid_margin: 0.2,
            snapshots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaGapConfig {
    pub delta: f64,
    pub gamma: f64,
    pub max_lag: usize,
}

impl Default for EmaGapConfig {
    fn default() -> Self {
        Self {
            delta: 0.9,
            gamma: 0.95,
            max_lag: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub name: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Parallel runs; defaults to the number of available cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_gap: Option<EmaGapConfig>,
}

impl CampaignConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// True when the campaign trains anything.
    pub fn has_runs(&self) -> bool {
        !self.datasets.is_empty() && !self.algorithms.is_empty()
    }
}

struct Checker(Vec<ConfigError>);

impl Checker {
    fn check(&mut self, ok: bool, path: impl Into<String>, message: &str) {
        if !ok {
            self.0.push(ConfigError {
                path: path.into(),
                message: message.to_string(),
            });
        }
    }
}

/// Parse and validate campaign text.
pub fn validate_config(text: &str) -> Result<CampaignConfig, ConfigErrors> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(text);
    let parsed: Result<CampaignConfig, _> = serde_ignored::deserialize(de, |path| {
        unknown.push(bracket_indices(&path.to_string()));
    });
    let config = match parsed {
        Ok(c) => c,
        Err(e) => {
            return Err(ConfigErrors(vec![ConfigError {
                path: String::new(),
                message: e.to_string().trim_end().to_string(),
            }]))
        }
    };
    let mut ck = Checker(
        unknown
            .into_iter()
            .map(|path| ConfigError {
                path,
                message: "unknown key".into(),
            })
            .collect(),
    );
    check_semantics(&config, &mut ck);
    if ck.0.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(ck.0))
    }
}

/// `datasets.0.noize` becomes `datasets[0].noize`.
fn bracket_indices(path: &str) -> String {
    let mut out = String::new();
    for seg in path.split('.') {
        if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
            out.push_str(&format!("[{seg}]"));
        } else {
            if !out.is_empty() {
                out.push('.');
            }
            out.push_str(seg);
        }
    }
    out
}

fn in_unit_open_closed(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

fn check_semantics(c: &CampaignConfig, ck: &mut Checker) {
    ck.check(!c.name.trim().is_empty(), "name", "must not be empty");
    ck.check(
        c.has_runs() || c.ema_gap.is_some(),
        "",
        "campaign needs datasets and algorithms, or an [ema_gap] section",
    );
    if c.has_runs() {
        ck.check(!c.seeds.is_empty(), "seeds", "seed list must not be empty");
    }
    if let Some(w) = c.workers {
        ck.check(w >= 1, "workers", "must be >= 1");
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &c.seeds {
        ck.check(seen.insert(*s), "seeds", "seeds must be distinct");
    }

    let t = &c.training;
    ck.check(t.iterations > 0, "training.iterations", "must be positive");
    ck.check(t.w_max >= 0.0 && t.w_max.is_finite(), "training.w_max", "must be finite and >= 0");
    ck.check(t.lr > 0.0 && t.lr.is_finite(), "training.lr", "must be positive");
    ck.check(
        t.lr_decay.windows(2).all(|w| w[0].0 < w[1].0),
        "training.lr_decay",
        "decay points must be sorted by strictly increasing iteration",
    );
    for (i, (_, m)) in t.lr_decay.iter().enumerate() {
        ck.check(*m > 0.0 && m.is_finite(), format!("training.lr_decay[{i}]"), "multiplier must be positive");
    }
    ck.check((0.0..1.0).contains(&t.momentum), "training.momentum", "momentum must lie in [0,1)");
    ck.check(t.weight_decay >= 0.0, "training.weight_decay", "must be >= 0");
    ck.check(in_unit_open_closed(t.ema_decay), "training.ema_decay", "gamma must lie in (0,1]");
    ck.check(t.labeled_batch > 0, "training.labeled_batch", "must be positive");
    ck.check(t.unlabeled_batch > 0, "training.unlabeled_batch", "must be positive");
    ck.check(t.input_noise >= 0.0 && t.input_noise.is_finite(), "training.input_noise", "must be finite and >= 0");
    ck.check(t.hidden_width > 0, "training.hidden_width", "must be positive");
    ck.check((1..=2).contains(&t.hidden_layers), "training.hidden_layers", "must be 1 or 2");
    ck.check(t.eval_every > 0, "training.eval_every", "must be positive");

    let mut names = std::collections::BTreeSet::new();
    for (i, d) in c.datasets.iter().enumerate() {
        let p = |f: &str| format!("datasets[{i}].{f}");
        ck.check(is_slug(&d.name), p("name"), "must be a nonempty [a-z0-9._-] slug");
        ck.check(names.insert(d.name.clone()), p("name"), "dataset names must be unique");
        ck.check(d.noise >= 0.0 && d.noise.is_finite(), p("noise"), "must be finite and >= 0");
        ck.check(d.labeled_max >= 1, p("labeled_max"), "must be >= 1");
        ck.check(d.rho_l >= 1.0 && d.rho_l.is_finite(), p("rho_l"), "imbalance factor must be >= 1");
        ck.check(d.unlabeled_max >= 1, p("unlabeled_max"), "must be >= 1");
        ck.check(d.val_per_class >= 1, p("val_per_class"), "must be >= 1");
        match d.kind {
            DatasetKind::TwoMoons => ck.check(
                d.spin_geometry.is_none(),
                p("spin_geometry"),
                "only valid for four-spins",
            ),
            DatasetKind::FourSpins => ck.check(
                d.moon_geometry.is_none(),
                p("moon_geometry"),
                "only valid for two-moons",
            ),
        }
        if let Some(g) = &d.spin_geometry {
            ck.check(
                g.inner_radius >= 0.0 && g.outer_radius > g.inner_radius,
                p("spin_geometry"),
                "need 0 <= inner_radius < outer_radius",
            );
            ck.check(g.sweep > 0.0 && g.sweep.is_finite(), p("spin_geometry.sweep"), "must be positive");
        }
    }

    let mut names = std::collections::BTreeSet::new();
    for (i, a) in c.algorithms.iter().enumerate() {
        let p = |f: &str| format!("algorithms[{i}].{f}");
        ck.check(is_slug(&a.name), p("name"), "must be a nonempty [a-z0-9._-] slug");
        ck.check(names.insert(a.name.clone()), p("name"), "algorithm names must be unique");
        if let Some(w) = a.w_max {
            ck.check(w >= 0.0 && w.is_finite(), p("w_max"), "must be finite and >= 0");
        }
        match a.reweight {
            ReweightSpec::Focal { gamma } => {
                ck.check(gamma >= 0.0 && gamma.is_finite(), p("reweight.gamma"), "focal gamma must be >= 0")
            }
            ReweightSpec::Cb { beta } => {
                ck.check((0.0..1.0).contains(&beta), p("reweight.beta"), "beta must lie in [0,1)")
            }
            ReweightSpec::Ce | ReweightSpec::In => {}
        }
        if let Some(th) = a.threshold {
            ck.check(a.kind == AlgorithmKind::PseudoLabel, p("threshold"), "only valid for pseudo-label");
            ck.check(in_unit_open_closed(th), p("threshold"), "threshold must lie in (0,1]");
        }
        if let Some(shape) = a.scl {
            ck.check(a.kind == AlgorithmKind::MeanTeacherScl, p("scl"), "only valid for mean-teacher-scl");
            if let SclShape::Exponential { beta } = shape {
                ck.check(in_unit_open_closed(beta), p("scl.beta"), "beta must lie in (0,1]");
            }
        }
        if a.argmax.is_some() {
            ck.check(a.kind == AlgorithmKind::MeanTeacherScl, p("argmax"), "only valid for mean-teacher-scl");
        }
    }

    let r = &c.report;
    ck.check(r.grid_resolution >= 2, "report.grid_resolution", "must be >= 2");
    ck.check(r.grid_margin >= 0.0 && r.grid_margin.is_finite(), "report.grid_margin", "must be finite and >= 0");

    if let Some(g) = &c.ema_gap {
        ck.check((0.0..1.0).contains(&g.delta), "ema_gap.delta", "delta must lie in [0,1)");
        ck.check(in_unit_open_closed(g.gamma), "ema_gap.gamma", "gamma must lie in (0,1]");
        ck.check(g.max_lag >= 1, "ema_gap.max_lag", "must be >= 1");
    }
}

fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '-' | '_' | '.'))
}

/// Built-in campaign presets.
pub const PRESETS: [(&str, &str); 4] = [
    ("toy-table1", include_str!("../presets/toy-table1.toml")),
    ("toy-figure1-grids", include_str!("../presets/toy-figure1-grids.toml")),
    ("ema-gap", include_str!("../presets/ema-gap.toml")),
    ("ablation-scl-shapes", include_str!("../presets/ablation-scl-shapes.toml")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset(name: &str) -> Option<CampaignConfig> {
    preset_text(name).map(|t| validate_config(t).expect("built-in presets validate"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra_algo: &str) -> String {
        format!(
            r#"
name = "t"
seeds = [1]

[[datasets]]
name = "m"
kind = "two-moons"
noise = 0.1
labeled_max = 10
rho_l = 5.0
unlabeled_type = "same"
unlabeled_max = 100
val_per_class = 50

[[algorithms]]
name = "a"
{extra_algo}
"#
        )
    }

    #[test]
    fn scl_beta_out_of_range() {
        let err = validate_config(&minimal(
            "kind = \"mean-teacher-scl\"\nscl = { shape = \"exponential\", beta = 1.5 }",
        ))
        .unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].path, "algorithms[0].scl.beta");
        assert!(err.to_string().contains("beta must lie in (0,1]"));
    }

    #[test]
    fn empty_seed_list_rejected() {
        let text = minimal("kind = \"supervised\"").replace("seeds = [1]", "seeds = []");
        let err = validate_config(&text).unwrap_err();
        assert!(err.0.iter().any(|e| e.path == "seeds"));
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let text = minimal("kind = \"supervised\"\nthreshhold = 0.9")
            .replace("noise = 0.1", "noise = 0.1\nnoize = 0.2");
        let err = validate_config(&text).unwrap_err();
        let paths: Vec<_> = err.0.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"datasets[0].noize"), "{paths:?}");
        assert!(paths.contains(&"algorithms[0].threshhold"), "{paths:?}");
    }

    #[test]
    fn range_errors_are_aggregated() {
        let text = minimal("kind = \"pseudo-label\"\nthreshold = 0.0")
            .replace("rho_l = 5.0", "rho_l = 0.5")
            .replace("seeds = [1]", "seeds = [1]\n[training]\nmomentum = 1.0");
        let err = validate_config(&text).unwrap_err();
        let paths: Vec<_> = err.0.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"datasets[0].rho_l"));
        assert!(paths.contains(&"algorithms[0].threshold"));
        assert!(paths.contains(&"training.momentum"));
    }

    #[test]
    fn syntax_errors_surface() {
        assert!(validate_config("name = ").is_err());
    }

    #[test]
    fn presets_all_validate() {
        for (name, _) in PRESETS {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let p = preset("toy-table1").unwrap();
        assert_eq!(validate_config(&p.to_toml()).unwrap(), p);
    }
}
