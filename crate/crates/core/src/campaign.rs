//! Campaign execution: every dataset × algorithm × seed cell, then reports.
//!
//! Output layout under the campaign directory:
//!
//! ```text
//! manifest.toml          config hash, embedded config, per-run seeds and status
//! table.csv              student errors, mean±std over seeds
//! table_ema.csv          EMA-model errors for algorithms that keep one
//! runs.csv               per-run group errors
//! timing.csv             wall-clock seconds per run (not deterministic)
//! failures.txt           only when some run failed
//! gap_curve.csv          only with an [ema_gap] section
//! runs/<dataset>/<algorithm>/seed-<n>/
//!     history.csv  student.bin  target.bin  grid.csv  grid_ema.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis;
use crate::config::{CampaignConfig, DatasetConfig, DatasetKind};
use crate::data::{self, CisslSplit, DataError};
use crate::net::NetError;
use crate::report::{self, Aggregates, Bbox, GroupErrors, ReportError};
use crate::train::{self, RunResult, TrainError};

/// Offset between a run seed and the seed of the pool it samples from.
pub const POOL_SEED_OFFSET: u64 = 1000;

/// Environment variable that overrides the worker count.
pub const WORKERS_ENV: &str = "CISSL_WORKERS";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("bad run filter {0:?}; expected dataset/algorithm/seed with * wildcards")]
    Filter(String),
    #[error("run filter {0:?} matches no run")]
    NoMatch(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Why a single run failed.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("snapshot: {0}")]
    Net(#[from] NetError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class {0} has no validation samples")]
    MissingClass(usize),
    #[error("panicked: {0}")]
    Panic(String),
}

/// Seeds that fully determine one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub pool: u64,
    pub split: u64,
    pub train: u64,
}

impl RunSeeds {
    pub fn for_seed(seed: u64) -> Self {
        Self {
            pool: seed + POOL_SEED_OFFSET,
            split: seed,
            train: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub dataset: String,
    pub algorithm: String,
    pub seed: u64,
}

impl RunKey {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("runs")
            .join(&self.dataset)
            .join(&self.algorithm)
            .join(format!("seed-{}", self.seed))
    }
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.dataset, self.algorithm, self.seed)
    }
}

/// `dataset/algorithm/seed` selector; any part may be `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFilter {
    dataset: Option<String>,
    algorithm: Option<String>,
    seed: Option<u64>,
}

impl RunFilter {
    pub fn parse(text: &str) -> Result<Self, CampaignError> {
        let bad = || CampaignError::Filter(text.to_string());
        let parts: Vec<&str> = text.split('/').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(bad());
        }
        let part = |s: &str| (s != "*").then(|| s.to_string());
        let seed = match parts[2] {
            "*" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        };
        Ok(Self {
            dataset: part(parts[0]),
            algorithm: part(parts[1]),
            seed,
        })
    }

    pub fn matches(&self, key: &RunKey) -> bool {
        self.dataset.as_ref().is_none_or(|d| *d == key.dataset)
            && self.algorithm.as_ref().is_none_or(|a| *a == key.algorithm)
            && self.seed.is_none_or(|s| s == key.seed)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CampaignOptions {
    /// Overrides the config's output directory.
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub only: Option<RunFilter>,
}

/// Errors of one successful run, per class and grouped.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub student: Vec<f64>,
    pub student_groups: GroupErrors,
    pub ema: Option<Vec<f64>>,
    pub ema_groups: Option<GroupErrors>,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub key: RunKey,
    pub seeds: RunSeeds,
    pub result: Result<RunSummary, RunError>,
}

#[derive(Debug)]
pub struct CampaignReport {
    pub output_dir: PathBuf,
    pub outcomes: Vec<RunOutcome>,
    pub student: Aggregates,
    pub ema: Aggregates,
}

impl CampaignReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.outcomes.iter().filter(|o| o.result.is_err())
    }

    pub fn all_succeeded(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Pool large enough for the split, drawn from `seeds.pool`.
pub fn build_pool(ds: &DatasetConfig, seed: u64) -> Result<data::Dataset2D, DataError> {
    let n = ds.pool_per_class();
    let pool = match ds.kind {
        DatasetKind::TwoMoons => data::gen_two_moons_with_loci(
            &ds.moon_geometry.unwrap_or_default(),
            n,
            ds.noise,
            seed,
        )?,
        DatasetKind::FourSpins => data::gen_four_spins_with_loci(
            &ds.spin_geometry.unwrap_or_default(),
            n,
            ds.noise,
            seed,
        )?,
    };
    Ok(pool.0)
}

pub fn build_split(ds: &DatasetConfig, seeds: RunSeeds) -> Result<CisslSplit, DataError> {
    let pool = build_pool(ds, seeds.pool)?;
    let labeled = data::imbalance_counts(ds.labeled_max, ds.rho_l, ds.kind.num_classes())?;
    data::make_cissl_split(
        &pool,
        &labeled,
        ds.unlabeled_type,
        ds.rho_l,
        ds.unlabeled_max,
        ds.val_per_class,
        seeds.split,
    )
}

/// Train a single cell in memory, without touching the filesystem.
pub fn train_cell(
    config: &CampaignConfig,
    dataset: usize,
    algorithm: usize,
    seed: u64,
) -> Result<(CisslSplit, RunResult), RunError> {
    let ds = &config.datasets[dataset];
    let algo = &config.algorithms[algorithm];
    let seeds = RunSeeds::for_seed(seed);
    let split = build_split(ds, seeds)?;
    let train_config = config.training.train_config(algo.w_max, seeds.train);
    let result = train::train(&split, &algo.spec(), &train_config)?;
    Ok((split, result))
}

fn complete(errors: &[Option<f64>]) -> Result<Vec<f64>, RunError> {
    errors
        .iter()
        .enumerate()
        .map(|(c, e)| e.ok_or(RunError::MissingClass(c)))
        .collect()
}

fn execute(
    config: &CampaignConfig,
    dataset: usize,
    algorithm: usize,
    seed: u64,
    dir: &Path,
) -> Result<RunSummary, RunError> {
    let (split, result) = train_cell(config, dataset, algorithm, seed)?;
    let mode = config.report.group_mode;
    let student = complete(result.final_errors())?;
    let student_groups = report::group_errors_with(&student, &split.labeled_counts, mode)?;
    let ema = result.final_ema_errors().map(complete).transpose()?;
    let ema_groups = ema
        .as_deref()
        .map(|e| report::group_errors_with(e, &split.labeled_counts, mode))
        .transpose()?;

    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    report::write_file(&dir.join("history.csv"), &train::history_csv(&result.history))?;
    if config.report.snapshots {
        result.student.write_snapshot(&dir.join("student.bin"))?;
        if let Some(t) = &result.target {
            t.write_snapshot(&dir.join("target.bin"))?;
        }
    }
    if config.report.grids {
        let bbox = Bbox::around(split.validation.points(), config.report.grid_margin);
        let n = config.report.grid_resolution;
        let grid = report::boundary_grid(&result.student, bbox, n, n)?;
        report::write_file(&dir.join("grid.csv"), &report::grid_csv(&grid))?;
        if let Some(t) = &result.target {
            let grid = report::boundary_grid(t, bbox, n, n)?;
            report::write_file(&dir.join("grid_ema.csv"), &report::grid_csv(&grid))?;
        }
    }
    Ok(RunSummary {
        student,
        student_groups,
        ema,
        ema_groups,
        wall_seconds: result.wall_seconds,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn create_dir(dir: &Path) -> Result<(), CampaignError> {
    std::fs::create_dir_all(dir).map_err(|source| CampaignError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Worker count: explicit option, then the environment, then the config, then the core count.
pub fn resolve_workers(config: &CampaignConfig, explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok()?.parse().ok())
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Default output directory when neither the config nor the caller sets one.
pub fn default_output_dir(config: &CampaignConfig) -> PathBuf {
    Path::new("out").join(&config.name)
}

/// Run every selected cell and write all reports.
///
/// Individual run failures are recorded, not returned; the error path is
/// reserved for problems that prevent writing the reports at all.
pub fn run_campaign(
    config: &CampaignConfig,
    config_text: &str,
    options: &CampaignOptions,
) -> Result<CampaignReport, CampaignError> {
    let root = options
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| default_output_dir(config));
    create_dir(&root)?;

    let mut cells = Vec::new();
    for (di, ds) in config.datasets.iter().enumerate() {
        for (ai, algo) in config.algorithms.iter().enumerate() {
            for &seed in &config.seeds {
                let key = RunKey {
                    dataset: ds.name.clone(),
                    algorithm: algo.name.clone(),
                    seed,
                };
                if options.only.as_ref().is_none_or(|f| f.matches(&key)) {
                    cells.push((di, ai, key));
                }
            }
        }
    }
    if let Some(f) = &options.only {
        if cells.is_empty() {
            return Err(CampaignError::NoMatch(format!("{f:?}")));
        }
    }

    let workers = resolve_workers(config, options.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CampaignError::Pool(e.to_string()))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|(di, ai, key)| {
                let dir = key.dir(&root);
                let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    execute(config, *di, *ai, key.seed, &dir)
                }))
                .unwrap_or_else(|p| Err(RunError::Panic(panic_message(p))));
                RunOutcome {
                    key: key.clone(),
                    seeds: RunSeeds::for_seed(key.seed),
                    result,
                }
            })
            .collect()
    });

    let (student, ema) = aggregate(&outcomes)?;
    let order: Vec<String> = config.algorithms.iter().map(|a| a.name.clone()).collect();
    if !outcomes.is_empty() {
        report::write_report(&student, &order, &[], &root)?;
        let ema_order: Vec<String> = config
            .algorithms
            .iter()
            .filter(|a| a.spec().algorithm.uses_ema())
            .map(|a| a.name.clone())
            .collect();
        if !ema_order.is_empty() {
            report::write_file(&root.join("table_ema.csv"), &report::table_csv(&ema, &ema_order))?;
        }
        report::write_file(&root.join("runs.csv"), &runs_csv(&outcomes))?;
        report::write_file(&root.join("timing.csv"), &timing_csv(&outcomes))?;
    }
    if let Some(g) = &config.ema_gap {
        let path = root.join("gap_curve.csv");
        analysis::write_gap_curve_csv(&path, &analysis::gap_curve(g.max_lag, g.delta, g.gamma))
            .map_err(|source| CampaignError::Io { path, source })?;
    }
    report::write_file(&root.join("manifest.toml"), &manifest(config, config_text, &outcomes))?;
    let failures = root.join("failures.txt");
    if outcomes.iter().any(|o| o.result.is_err()) {
        let mut text = String::new();
        for o in &outcomes {
            if let Err(e) = &o.result {
                let _ = writeln!(text, "{}: {e}", o.key);
            }
        }
        report::write_file(&failures, &text)?;
    } else if failures.exists() {
        std::fs::remove_file(&failures).map_err(|source| CampaignError::Io {
            path: failures.clone(),
            source,
        })?;
    }

    Ok(CampaignReport {
        output_dir: root,
        outcomes,
        student,
        ema,
    })
}

fn aggregate(outcomes: &[RunOutcome]) -> Result<(Aggregates, Aggregates), ReportError> {
    let mut student: BTreeMap<(String, String), Vec<GroupErrors>> = BTreeMap::new();
    let mut ema: BTreeMap<(String, String), Vec<GroupErrors>> = BTreeMap::new();
    for o in outcomes {
        if let Ok(s) = &o.result {
            let k = (o.key.dataset.clone(), o.key.algorithm.clone());
            student.entry(k.clone()).or_default().push(s.student_groups);
            if let Some(g) = s.ema_groups {
                ema.entry(k).or_default().push(g);
            }
        }
    }
    let fold = |m: BTreeMap<(String, String), Vec<GroupErrors>>| -> Result<Aggregates, ReportError> {
        let mut out = Aggregates::new();
        for ((d, a), runs) in m {
            out.entry(d).or_default().insert(a, report::aggregate_runs(&runs)?);
        }
        Ok(out)
    };
    Ok((fold(student)?, fold(ema)?))
}

fn fmt_opt(g: Option<GroupErrors>) -> [String; 3] {
    match g {
        Some(g) => [g.all, g.major, g.minor].map(|v| format!("{v:.16e}")),
        None => Default::default(),
    }
}

fn runs_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("dataset,algorithm,seed,status,all,major,minor,ema_all,ema_major,ema_minor\n");
    for o in outcomes {
        let (status, st, em) = match &o.result {
            Ok(r) => ("ok", fmt_opt(Some(r.student_groups)), fmt_opt(r.ema_groups)),
            Err(_) => ("failed", fmt_opt(None), fmt_opt(None)),
        };
        let _ = writeln!(
            s,
            "{},{},{},{status},{},{}",
            o.key.dataset,
            o.key.algorithm,
            o.key.seed,
            st.join(","),
            em.join(",")
        );
    }
    s
}

fn timing_csv(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("dataset,algorithm,seed,wall_seconds\n");
    for o in outcomes {
        if let Ok(r) = &o.result {
            let k = &o.key;
            let _ = writeln!(s, "{},{},{},{:.3}", k.dataset, k.algorithm, k.seed, r.wall_seconds);
        }
    }
    s
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn manifest(config: &CampaignConfig, config_text: &str, outcomes: &[RunOutcome]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name = {}", toml_string(&config.name));
    let _ = writeln!(s, "config_sha256 = \"{}\"", config_hash(config_text));
    let _ = writeln!(s, "pool_seed_offset = {POOL_SEED_OFFSET}");
    let _ = writeln!(s, "config = {}", toml_string(config_text));
    for o in outcomes {
        let _ = writeln!(s, "\n[[runs]]");
        let _ = writeln!(s, "dataset = {}", toml_string(&o.key.dataset));
        let _ = writeln!(s, "algorithm = {}", toml_string(&o.key.algorithm));
        let _ = writeln!(s, "seed = {}", o.key.seed);
        let _ = writeln!(s, "pool_seed = {}", o.seeds.pool);
        let _ = writeln!(s, "split_seed = {}", o.seeds.split);
        let _ = writeln!(s, "train_seed = {}", o.seeds.train);
        let _ = writeln!(s, "status = \"{}\"", if o.result.is_ok() { "ok" } else { "failed" });
    }
    s
}
