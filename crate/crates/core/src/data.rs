//! Synthetic 2-D datasets and class-imbalanced labeled/unlabeled/validation splits.
//!
//! Two families are generated:
//!
//! * **two moons**: class 0 lies on the upper unit semicircle centred at the
//!   origin, class 1 on the reflected semicircle shifted by
//!   [`MoonGeometry::offset`].
//! * **four spins**: class `k` lies on an Archimedean arm rotated by
//!   `k * pi / 2`, see [`SpinGeometry`].
//!
//! Noise-free loci are sampled uniformly in the curve parameter, then
//! isotropic Gaussian noise is added per point.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Geometry of the two-moons family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoonGeometry {
    /// Translation of the lower (reflected) moon relative to the upper one.
    pub offset: (f64, f64),
}

impl Default for MoonGeometry {
    fn default() -> Self {
        Self {
            offset: (1.0, 0.5),
        }
    }
}

/// Geometry of the four-spins family: arm `k` is
/// `r = inner_radius + (outer_radius - inner_radius) * phi / sweep`, rotated by `k * pi / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinGeometry {
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Angular extent of each arm in radians.
    pub sweep: f64,
}

impl Default for SpinGeometry {
    fn default() -> Self {
        Self {
            inner_radius: 0.3,
            outer_radius: 1.0,
            sweep: 0.75 * PI,
        }
    }
}

impl SpinGeometry {
    /// Radial distance between neighbouring arms along any ray.
    pub fn arm_spacing(&self) -> f64 {
        (self.outer_radius - self.inner_radius) / self.sweep * FRAC_PI_2
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("n_per_class must be at least 1")]
    EmptyClass,
    #[error("noise_std must be finite and nonnegative, got {0}")]
    BadNoise(f64),
    #[error("imbalance factor must be >= 1, got {0}")]
    BadImbalance(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class counts must all be >= 1")]
    ZeroCount,
    #[error("expected {expected} classes, got {got}")]
    ClassMismatch { expected: usize, got: usize },
    #[error("pool too small for class {class}: need {needed} samples, have {available}")]
    InsufficientPool {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("io error writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Rotation about the origin by `angle` radians.
    pub fn rotated(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Labeled 2-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    points: Vec<Point2>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset2D {
    pub fn new(points: Vec<Point2>, labels: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(points.len(), labels.len(), "points/labels length mismatch");
        assert!(num_classes >= 2, "need at least two classes");
        assert!(
            labels.iter().all(|&l| l < num_classes),
            "label out of range"
        );
        Self {
            points,
            labels,
            num_classes,
        }
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of every sample of class `c`, in storage order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset2D {
        Dataset2D {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |(x0, x1, y0, y1), p| (x0.min(p.x), x1.max(p.x), y0.min(p.y), y1.max(p.y)),
        )
    }
}

/// Per-class sample counts. Every entry is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self, DataError> {
        if counts.len() < 2 {
            return Err(DataError::TooFewClasses(counts.len()));
        }
        if counts.contains(&0) {
            return Err(DataError::ZeroCount);
        }
        Ok(Self(counts))
    }

    /// All classes with the same count.
    pub fn uniform(n: usize, num_classes: usize) -> Result<Self, DataError> {
        Self::new(vec![n; num_classes])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, c: usize) -> usize {
        self.0[c]
    }

    pub fn max(&self) -> usize {
        *self.0.iter().max().expect("nonempty")
    }

    pub fn min(&self) -> usize {
        *self.0.iter().min().expect("nonempty")
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Most frequent class; ties go to the lowest index.
    pub fn major_class(&self) -> usize {
        let m = self.max();
        self.0.iter().position(|&c| c == m).expect("nonempty")
    }

    /// Least frequent class; ties go to the lowest index.
    pub fn minor_class(&self) -> usize {
        let m = self.min();
        self.0.iter().position(|&c| c == m).expect("nonempty")
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "}}")
    }
}

fn check_gen_args(n_per_class: usize, noise_std: f64) -> Result<(), DataError> {
    if n_per_class == 0 {
        return Err(DataError::EmptyClass);
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(DataError::BadNoise(noise_std));
    }
    Ok(())
}

/// Noise-free two-moons locus for `class` at curve parameter `s in [0, 1]`.
pub fn moon_point(geometry: &MoonGeometry, class: usize, s: f64) -> Point2 {
    let t = PI * s;
    let (ox, oy) = geometry.offset;
    match class {
        0 => Point2::new(t.cos(), t.sin()),
        1 => Point2::new(t.cos() + ox, -t.sin() + oy),
        _ => panic!("two moons has classes 0 and 1, got {class}"),
    }
}

/// Exact Euclidean distance from `p` to the noise-free arc of `class`.
pub fn moon_arc_distance(geometry: &MoonGeometry, class: usize, p: Point2) -> f64 {
    let (ox, oy) = geometry.offset;
    // Map onto the upper unit semicircle frame.
    let q = match class {
        0 => p,
        1 => Point2::new(p.x - ox, -(p.y - oy)),
        _ => panic!("two moons has classes 0 and 1, got {class}"),
    };
    if q.y >= 0.0 {
        (q.x.hypot(q.y) - 1.0).abs()
    } else {
        q.dist(&Point2::new(1.0, 0.0))
            .min(q.dist(&Point2::new(-1.0, 0.0)))
    }
}

/// Noise-free four-spins locus for arm `class` at curve parameter `s in [0, 1]`.
pub fn spin_point(geometry: &SpinGeometry, class: usize, s: f64) -> Point2 {
    assert!(class < 4, "four spins has classes 0..4, got {class}");
    let phi = geometry.sweep * s;
    let r = geometry.inner_radius + (geometry.outer_radius - geometry.inner_radius) * s;
    let (sin, cos) = (phi + class as f64 * FRAC_PI_2).sin_cos();
    Point2::new(r * cos, r * sin)
}

fn generate(
    num_classes: usize,
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
    locus: impl Fn(usize, f64) -> Point2,
) -> (Dataset2D, Vec<Point2>) {
    let mut rng = rng::stream(seed, rng::Stream::Data);
    let n = num_classes * n_per_class;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut loci = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..n_per_class {
            let s: f64 = rng.gen();
            let base = locus(c, s);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            points.push(Point2::new(
                base.x + noise_std * nx,
                base.y + noise_std * ny,
            ));
            labels.push(c);
            loci.push(base);
        }
    }
    (Dataset2D::new(points, labels, num_classes), loci)
}

/// Two interleaved moons with the default geometry, `n_per_class` samples each.
pub fn gen_two_moons(n_per_class: usize, noise_std: f64, seed: u64) -> Result<Dataset2D, DataError> {
    gen_two_moons_with_loci(&MoonGeometry::default(), n_per_class, noise_std, seed).map(|(d, _)| d)
}

/// Two moons, also returning the noise-free point each sample was drawn around.
pub fn gen_two_moons_with_loci(
    geometry: &MoonGeometry,
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset2D, Vec<Point2>), DataError> {
    check_gen_args(n_per_class, noise_std)?;
    Ok(generate(2, n_per_class, noise_std, seed, |c, s| {
        moon_point(geometry, c, s)
    }))
}

/// Four spiral arms with the default geometry, `n_per_class` samples each.
pub fn gen_four_spins(n_per_class: usize, noise_std: f64, seed: u64) -> Result<Dataset2D, DataError> {
    gen_four_spins_with_loci(&SpinGeometry::default(), n_per_class, noise_std, seed).map(|(d, _)| d)
}

pub fn gen_four_spins_with_loci(
    geometry: &SpinGeometry,
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset2D, Vec<Point2>), DataError> {
    check_gen_args(n_per_class, noise_std)?;
    Ok(generate(4, n_per_class, noise_std, seed, |c, s| {
        spin_point(geometry, c, s)
    }))
}

/// Closed-form profile before rounding: `n_max * rho^(-rank / (C - 1))`.
pub fn imbalance_profile(n_max: usize, rho: f64, num_classes: usize) -> Vec<f64> {
    let denom = (num_classes - 1) as f64;
    (0..num_classes)
        .map(|rank| n_max as f64 * rho.powf(-(rank as f64) / denom))
        .collect()
}

/// Per-rank class sizes for imbalance factor `rho`; index 0 is the most frequent class.
///
/// Rounds half up and never drops below one sample.
pub fn imbalance_counts(n_max: usize, rho: f64, num_classes: usize) -> Result<ClassCounts, DataError> {
    if n_max == 0 {
        return Err(DataError::EmptyClass);
    }
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(DataError::BadImbalance(rho));
    }
    let counts = imbalance_profile(n_max, rho, num_classes)
        .into_iter()
        .map(|v| ((v + 0.5).floor() as usize).max(1))
        .collect();
    ClassCounts::new(counts)
}

/// Shape of the unlabeled class distribution relative to the labeled one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlabeledType {
    /// Every class equally represented.
    Uniform,
    /// Imbalance factor halved.
    Half,
    /// Same imbalance factor as the labeled set.
    Same,
}

impl UnlabeledType {
    pub fn rho(&self, rho_l: f64) -> f64 {
        match self {
            UnlabeledType::Uniform => 1.0,
            UnlabeledType::Half => (rho_l / 2.0).max(1.0),
            UnlabeledType::Same => rho_l,
        }
    }
}

/// Disjoint labeled / unlabeled / validation partitions of a sample pool.
///
/// Labels of the unlabeled partition are kept for bookkeeping only; trainers
/// see [`CisslSplit::unlabeled_points`].
#[derive(Debug, Clone)]
pub struct CisslSplit {
    pub labeled: Dataset2D,
    unlabeled: Dataset2D,
    pub validation: Dataset2D,
    /// Labeled sample count per class.
    pub labeled_counts: ClassCounts,
    /// Unlabeled sample count per class.
    pub unlabeled_counts: ClassCounts,
    /// `class_of_rank[r]` is the class that received frequency rank `r`.
    pub class_of_rank: Vec<usize>,
    pool_indices: [Vec<usize>; 3],
}

impl CisslSplit {
    pub fn unlabeled_points(&self) -> &[Point2] {
        self.unlabeled.points()
    }

    pub fn num_classes(&self) -> usize {
        self.labeled.num_classes()
    }

    /// Ground truth of the unlabeled partition; never handed to trainers.
    pub fn unlabeled_reference(&self) -> &Dataset2D {
        &self.unlabeled
    }

    /// Pool indices of the labeled, unlabeled and validation partitions.
    pub fn pool_indices(&self) -> (&[usize], &[usize], &[usize]) {
        (
            &self.pool_indices[0],
            &self.pool_indices[1],
            &self.pool_indices[2],
        )
    }

    /// Dump all partitions as CSV with header `x,y,label,partition`.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "x,y,label,partition").map_err(io)?;
        for (name, d) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("validation", &self.validation),
        ] {
            for (p, l) in d.points().iter().zip(d.labels()) {
                writeln!(out, "{:.17e},{:.17e},{l},{name}", p.x, p.y).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Carve `pool` into an imbalanced CISSL split.
///
/// `labeled_counts` is given in rank order (index 0 = most frequent). A
/// seed-dependent permutation decides which class receives which rank; the
/// same permutation orders the unlabeled profile, drawn from
/// `imbalance_counts(n_unlabeled_max, rho_u, C)`.
pub fn make_cissl_split(
    pool: &Dataset2D,
    labeled_counts: &ClassCounts,
    unlabeled_type: UnlabeledType,
    rho_l: f64,
    n_unlabeled_max: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<CisslSplit, DataError> {
    let c = pool.num_classes();
    if labeled_counts.num_classes() != c {
        return Err(DataError::ClassMismatch {
            expected: c,
            got: labeled_counts.num_classes(),
        });
    }
    if !(rho_l >= 1.0) {
        return Err(DataError::BadImbalance(rho_l));
    }
    let unlabeled_by_rank = imbalance_counts(n_unlabeled_max, unlabeled_type.rho(rho_l), c)?;

    let mut rng = rng::stream(seed, rng::Stream::Split);
    let mut class_of_rank: Vec<usize> = (0..c).collect();
    class_of_rank.shuffle(&mut rng);

    let mut lab_counts = vec![0; c];
    let mut unl_counts = vec![0; c];
    for (rank, &class) in class_of_rank.iter().enumerate() {
        lab_counts[class] = labeled_counts.get(rank);
        unl_counts[class] = unlabeled_by_rank.get(rank);
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..c {
        let mut idx = pool.indices_of(class);
        let needed = lab_counts[class] + unl_counts[class] + val_per_class;
        if idx.len() < needed {
            return Err(DataError::InsufficientPool {
                class,
                needed,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let (lab, rest) = idx.split_at(lab_counts[class]);
        let (unl, rest) = rest.split_at(unl_counts[class]);
        parts[0].extend_from_slice(lab);
        parts[1].extend_from_slice(unl);
        parts[2].extend_from_slice(&rest[..val_per_class]);
    }
    // Class-blocked order would leak labels through position.
    parts[1].shuffle(&mut rng);

    Ok(CisslSplit {
        labeled: pool.subset(&parts[0]),
        unlabeled: pool.subset(&parts[1]),
        validation: pool.subset(&parts[2]),
        labeled_counts: ClassCounts::new(lab_counts)?,
        unlabeled_counts: ClassCounts::new(unl_counts)?,
        class_of_rank,
        pool_indices: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalance_counts_match_toy_profiles() {
        assert_eq!(imbalance_counts(10, 5.0, 2).unwrap().as_slice(), &[10, 2]);
        assert_eq!(imbalance_counts(5, 5.0, 4).unwrap().as_slice(), &[5, 3, 2, 1]);
        assert_eq!(imbalance_counts(7, 1.0, 3).unwrap().as_slice(), &[7, 7, 7]);
    }

    #[test]
    fn unlabeled_toy_totals() {
        // 3000 and 2658 unlabeled samples for the two toy sets.
        assert_eq!(imbalance_counts(2500, 5.0, 2).unwrap().total(), 3000);
        assert_eq!(imbalance_counts(1250, 5.0, 4).unwrap().total(), 2658);
    }

    #[test]
    fn imbalance_rejects_rho_below_one() {
        assert!(matches!(
            imbalance_counts(10, 0.5, 2),
            Err(DataError::BadImbalance(r)) if r == 0.5
        ));
    }

    #[test]
    fn zero_noise_points_lie_on_loci() {
        let m = gen_two_moons(1, 0.0, 0).unwrap();
        for (p, &l) in m.points().iter().zip(m.labels()) {
            assert!(moon_arc_distance(&MoonGeometry::default(), l, *p) < 1e-12);
        }
        let (s, loci) = gen_four_spins_with_loci(&SpinGeometry::default(), 1, 0.0, 0).unwrap();
        assert_eq!(s.points(), &loci[..]);
    }

    #[test]
    fn spins_are_rotations_of_arm_zero() {
        let g = SpinGeometry::default();
        for k in 0..4 {
            for i in 0..=20 {
                let s = i as f64 / 20.0;
                let p = spin_point(&g, k, s).rotated(-(k as f64) * FRAC_PI_2);
                assert!(p.dist(&spin_point(&g, 0, s)) < 1e-12);
            }
        }
    }

    #[test]
    fn generators_reject_bad_args() {
        assert!(matches!(gen_two_moons(0, 0.1, 0), Err(DataError::EmptyClass)));
        assert!(matches!(
            gen_four_spins(3, -1.0, 0),
            Err(DataError::BadNoise(_))
        ));
    }

    #[test]
    fn split_reports_short_class() {
        let pool = gen_two_moons(20, 0.1, 1).unwrap();
        let lab = ClassCounts::new(vec![10, 2]).unwrap();
        let err = make_cissl_split(&pool, &lab, UnlabeledType::Same, 5.0, 50, 5, 0).unwrap_err();
        assert!(matches!(err, DataError::InsufficientPool { needed: 65, available: 20, .. }));
    }

    #[test]
    fn half_type_halves_rho() {
        assert_eq!(UnlabeledType::Half.rho(10.0), 5.0);
        assert_eq!(UnlabeledType::Uniform.rho(10.0), 1.0);
        assert_eq!(UnlabeledType::Same.rho(10.0), 10.0);
    }
}
