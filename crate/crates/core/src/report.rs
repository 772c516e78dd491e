//! Major/minor error breakdowns, multi-seed aggregation, decision-boundary
//! confidence grids, and the CSV files they are written to.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassCounts, Point2};
use crate::net::{self, MlpParams, NetError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no runs to aggregate")]
    Empty,
    #[error("{errors} per-class errors for {counts} class counts")]
    Length { errors: usize, counts: usize },
    #[error("degenerate bounding box {0:?}")]
    BadBbox((f64, f64, f64, f64)),
    #[error("grid resolution must be at least 2x2, got {0}x{1}")]
    BadResolution(usize, usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Mean validation error over all classes, the most frequent class and the least frequent class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupErrors {
    pub all: f64,
    pub major: f64,
    pub minor: f64,
}

/// How the major and minor groups are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupMode {
    /// The single most and least frequent class.
    #[default]
    Single,
    /// Top and bottom halves by frequency (middle class excluded for odd C).
    Halves,
}

pub fn group_errors(per_class: &[f64], counts: &ClassCounts) -> Result<GroupErrors, ReportError> {
    group_errors_with(per_class, counts, GroupMode::Single)
}

pub fn group_errors_with(
    per_class: &[f64],
    counts: &ClassCounts,
    mode: GroupMode,
) -> Result<GroupErrors, ReportError> {
    if per_class.len() != counts.num_classes() || per_class.is_empty() {
        return Err(ReportError::Length {
            errors: per_class.len(),
            counts: counts.num_classes(),
        });
    }
    let all = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let (major, minor) = match mode {
        GroupMode::Single => (
            per_class[counts.major_class()],
            per_class[counts.minor_class()],
        ),
        GroupMode::Halves => {
            // Stable sort by descending count keeps lower indices first on ties.
            let mut order: Vec<usize> = (0..per_class.len()).collect();
            order.sort_by(|&a, &b| counts.get(b).cmp(&counts.get(a)));
            let half = order.len() / 2;
            let mean = |idx: &[usize]| idx.iter().map(|&i| per_class[i]).sum::<f64>() / idx.len() as f64;
            (mean(&order[..half]), mean(&order[order.len() - half..]))
        }
    };
    Ok(GroupErrors { all, major, minor })
}

/// Mean and sample standard deviation (`None` for a single run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let naive = values.iter().sum::<f64>() / n;
        // One refinement pass removes the rounding of the naive sum.
        let mean = naive + values.iter().map(|v| v - naive).sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub all: Stat,
    pub major: Stat,
    pub minor: Stat,
    pub runs: usize,
}

pub fn aggregate_runs(results: &[GroupErrors]) -> Result<GroupAggregate, ReportError> {
    let field = |f: fn(&GroupErrors) -> f64| {
        Stat::of(&results.iter().map(f).collect::<Vec<_>>()).ok_or(ReportError::Empty)
    };
    Ok(GroupAggregate {
        all: field(|g| g.all)?,
        major: field(|g| g.major)?,
        minor: field(|g| g.minor)?,
        runs: results.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bbox {
    /// Bounding box of `points`, widened by `margin` times its extent on every side.
    pub fn around(points: &[Point2], margin: f64) -> Bbox {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let (dx, dy) = ((x1 - x0) * margin, (y1 - y0) * margin);
        Bbox {
            xmin: x0 - dx,
            xmax: x1 + dx,
            ymin: y0 - dy,
            ymax: y1 + dy,
        }
    }

    fn is_valid(&self) -> bool {
        [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmax > self.xmin
            && self.ymax > self.ymin
    }
}

/// Top-class probability and arg-max class at each cell centre, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub bbox: Bbox,
    pub nx: usize,
    pub ny: usize,
    pub max_prob: Vec<f64>,
    pub argmax: Vec<usize>,
}

impl BoundaryGrid {
    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        cell_center(&self.bbox, self.nx, self.ny, ix, iy)
    }

    pub fn at(&self, ix: usize, iy: usize) -> (f64, usize) {
        let i = iy * self.nx + ix;
        (self.max_prob[i], self.argmax[i])
    }
}

fn cell_center(b: &Bbox, nx: usize, ny: usize, ix: usize, iy: usize) -> Point2 {
    Point2::new(
        b.xmin + (b.xmax - b.xmin) * (2 * ix + 1) as f64 / (2 * nx) as f64,
        b.ymin + (b.ymax - b.ymin) * (2 * iy + 1) as f64 / (2 * ny) as f64,
    )
}

pub fn boundary_grid(params: &MlpParams, bbox: Bbox, nx: usize, ny: usize) -> Result<BoundaryGrid, ReportError> {
    if !bbox.is_valid() {
        return Err(ReportError::BadBbox((bbox.xmin, bbox.xmax, bbox.ymin, bbox.ymax)));
    }
    if nx < 2 || ny < 2 {
        return Err(ReportError::BadResolution(nx, ny));
    }
    let centers: Vec<Point2> = (0..ny)
        .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| cell_center(&bbox, nx, ny, ix, iy))
        .collect();
    let mut max_prob = Vec::with_capacity(centers.len());
    let mut argmax = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(4096) {
        let probs = net::predict_proba(params, chunk)?;
        for (row, a) in probs.rows().into_iter().zip(net::argmax_rows(&probs)) {
            max_prob.push(row[a]);
            argmax.push(a);
        }
    }
    Ok(BoundaryGrid {
        bbox,
        nx,
        ny,
        max_prob,
        argmax,
    })
}

/// Aggregated results keyed by dataset, then algorithm.
pub type Aggregates = BTreeMap<String, BTreeMap<String, GroupAggregate>>;

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_stat(s: &Stat) -> String {
    match s.std {
        Some(sd) => format!("{}±{}", fmt_real(s.mean), fmt_real(sd)),
        None => fmt_real(s.mean),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const GROUPS: [&str; 3] = ["all", "major", "minor"];

fn group_stat<'a>(a: &'a GroupAggregate, group: &str) -> &'a Stat {
    match group {
        "all" => &a.all,
        "major" => &a.major,
        _ => &a.minor,
    }
}

/// Render the table: one row per dataset and group, one column per algorithm.
pub fn table_csv(aggregates: &Aggregates, algorithm_order: &[String]) -> String {
    let mut s = String::from("dataset,group");
    for a in algorithm_order {
        s.push(',');
        s.push_str(a);
    }
    s.push('\n');
    for (dataset, by_algo) in aggregates {
        for group in GROUPS {
            s.push_str(dataset);
            s.push(',');
            s.push_str(group);
            for a in algorithm_order {
                s.push(',');
                if let Some(agg) = by_algo.get(a) {
                    s.push_str(&fmt_stat(group_stat(agg, group)));
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Parse a table written by [`table_csv`]. Run counts are not stored and come back as 0.
pub fn parse_table_csv(text: &str, path: &Path) -> Result<Aggregates, ReportError> {
    let perr = |m: String| ReportError::Parse {
        path: path.to_path_buf(),
        message: m,
    };
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| perr(e.to_string()))?.clone();
    let algos: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut cells: BTreeMap<(String, String), [Option<Stat>; 3]> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let dataset = rec.get(0).unwrap_or_default().to_string();
        let group = GROUPS
            .iter()
            .position(|g| Some(*g) == rec.get(1))
            .ok_or_else(|| perr(format!("unknown group {:?}", rec.get(1))))?;
        for (a, cell) in algos.iter().zip(rec.iter().skip(2)) {
            if cell.is_empty() {
                continue;
            }
            let parse = |v: &str| v.parse::<f64>().map_err(|e| perr(format!("{v}: {e}")));
            let stat = match cell.split_once('±') {
                Some((m, sd)) => Stat {
                    mean: parse(m)?,
                    std: Some(parse(sd)?),
                },
                None => Stat {
                    mean: parse(cell)?,
                    std: None,
                },
            };
            cells.entry((dataset.clone(), a.clone())).or_default()[group] = Some(stat);
        }
    }
    let mut out = Aggregates::new();
    for ((dataset, algo), [all, major, minor]) in cells {
        let missing = || perr(format!("incomplete groups for {dataset}/{algo}"));
        out.entry(dataset.clone()).or_default().insert(
            algo.clone(),
            GroupAggregate {
                all: all.ok_or_else(missing)?,
                major: major.ok_or_else(missing)?,
                minor: minor.ok_or_else(missing)?,
                runs: 0,
            },
        );
    }
    Ok(out)
}

pub fn grid_csv(grid: &BoundaryGrid) -> String {
    let mut s = String::from("x,y,max_prob,argmax\n");
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let p = grid.cell_center(ix, iy);
            let (m, a) = grid.at(ix, iy);
            s.push_str(&format!("{},{},{},{a}\n", fmt_real(p.x), fmt_real(p.y), fmt_real(m)));
        }
    }
    s
}

/// Write `table.csv` plus one `grid_<name>.csv` per grid into `dir`.
pub fn write_report(
    aggregates: &Aggregates,
    algorithm_order: &[String],
    grids: &[(String, BoundaryGrid)],
    dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let table = dir.join("table.csv");
    write_file(&table, &table_csv(aggregates, algorithm_order))?;
    written.push(table);
    for (name, grid) in grids {
        let path = dir.join(format!("grid_{name}.csv"));
        write_file(&path, &grid_csv(grid))?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(io_err(path))
}
