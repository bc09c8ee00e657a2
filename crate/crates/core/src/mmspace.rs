//! Finite metric measure spaces: the discrete stand-in for `(X, d, m)`.
//!
//! Measures live on points: every integral `∫ f dm` becomes a mass-weighted
//! sum. Distances of spherical models are geodesic and measured in radians
//! (times the radius).

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::pairwise_sum;
use crate::quadrature::quad;

/// Largest point count for which triangle inequalities are checked exhaustively.
pub const EXHAUSTIVE_TRIANGLE_LIMIT: usize = 512;
/// Number of random triples checked above [`EXHAUSTIVE_TRIANGLE_LIMIT`].
pub const SAMPLED_TRIPLES: usize = 100_000;
/// Default cap on generated product spaces.
pub const DEFAULT_SIZE_CAP: usize = 20_000;

/// Read access to a finite metric measure space.
///
/// Implemented by [`FiniteMMSpace`] (tabulated distances) and by cones,
/// which evaluate their distance lazily.
pub trait MetricMeasure: Sync {
    fn len(&self) -> usize;
    fn dist(&self, i: usize, j: usize) -> f64;
    fn mass(&self) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn total_mass(&self) -> f64 {
        pairwise_sum(self.mass())
    }

    fn diameter(&self) -> f64 {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| self.dist(i, j)).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// Writes row `i` of the distance table into `out`.
    fn dist_row(&self, i: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.dist(i, j);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceMeta {
    pub generator: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// `n` points with a symmetric distance table and a nonnegative mass vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMMSpace {
    name: String,
    n: usize,
    dist: Vec<f64>,
    mass: Vec<f64>,
    labels: Option<Vec<String>>,
    coords: Option<Vec<Vec<f64>>>,
    meta: SpaceMeta,
}

impl MetricMeasure for FiniteMMSpace {
    fn len(&self) -> usize {
        self.n
    }
    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }
    fn mass(&self) -> &[f64] {
        &self.mass
    }
    fn dist_row(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(i));
    }
}

impl FiniteMMSpace {
    /// Builds a space from a row-major `n × n` distance table.
    ///
    /// Rejects NaN, infinite and negative entries and mismatched sizes; the
    /// metric axioms themselves are checked by [`validate_space`].
    pub fn new(dist: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        let n = mass.len();
        if n == 0 {
            return Err(Error::InvalidSpace("space has no points".into()));
        }
        if dist.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: dist.len(),
            });
        }
        if let Some(k) = dist.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidSpace(format!(
                "distance entry ({}, {}) = {} is not a finite nonnegative number",
                k / n,
                k % n,
                dist[k]
            )));
        }
        if let Some(k) = mass.iter().position(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidSpace(format!(
                "mass entry {k} = {} is not a finite nonnegative number",
                mass[k]
            )));
        }
        if pairwise_sum(&mass) <= 0.0 {
            return Err(Error::InvalidSpace("total mass must be positive".into()));
        }
        Ok(Self {
            name: String::new(),
            n,
            dist,
            mass,
            labels: None,
            coords: None,
            meta: SpaceMeta::default(),
        })
    }

    /// Tabulates any [`MetricMeasure`] into a dense space.
    pub fn from_metric<S: MetricMeasure + ?Sized>(space: &S) -> Result<Self> {
        let n = space.len();
        let mut dist = vec![0.0; n * n];
        dist.par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(i, row)| space.dist_row(i, row));
        Self::new(dist, space.mass().to_vec())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_meta(mut self, generator: impl Into<String>, params: serde_json::Value) -> Self {
        self.meta = SpaceMeta {
            generator: generator.into(),
            params,
        };
        self
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Embedding coordinates are metadata only; no algorithm reads them.
    pub fn with_coords(mut self, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: coords.len(),
            });
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn meta(&self) -> &SpaceMeta {
        &self.meta
    }
    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }
    pub fn dist_table(&self) -> &[f64] {
        &self.dist
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    /// Same metric with masses rescaled to total 1.
    pub fn normalized(&self) -> Self {
        let total = self.total_mass();
        let mut out = self.clone();
        out.mass.iter_mut().for_each(|m| *m /= total);
        out
    }

    /// Replaces the mass vector.
    pub fn with_mass(&self, mass: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(self.dist.clone(), mass)?;
        out.name = self.name.clone();
        out.labels = self.labels.clone();
        out.coords = self.coords.clone();
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Index of the point whose distance to `from` is closest to `target`.
    pub fn point_at_distance(&self, from: usize, target: f64) -> usize {
        self.row(from)
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != from)
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
            .map(|(j, _)| j)
            .unwrap_or(from)
    }

    /// Keeps the even-indexed points and moves each dropped point's mass to
    /// its nearest kept point. Returns the coarse space and, for every
    /// original index, the index of its representative. Suited to ordered
    /// samplings such as circles.
    pub fn half_resolution(&self) -> Result<(Self, Vec<usize>)> {
        let kept: Vec<usize> = (0..self.n).step_by(2).collect();
        self.coarsen(&kept, "half_resolution")
    }

    /// A space at half the sampling resolution, together with the coarse
    /// index of each point in `points`. Spaces from a known generator are
    /// regenerated with half as many points and `points` are matched by
    /// coordinates; other spaces fall back to [`Self::half_resolution`].
    pub fn coarse_rerun_space(&self, points: &[usize]) -> Result<(Self, Vec<usize>)> {
        let params = &self.meta.params;
        let half = self.n.div_ceil(2);
        let regenerated = match self.meta.generator.as_str() {
            "circle" => params["circumference"].as_f64().map(|c| circle(c, half)),
            "sphere_fibonacci" => params["radius"].as_f64().map(|r| sphere_fibonacci(2, r, half)),
            _ => None,
        };
        match (regenerated, &self.coords) {
            (Some(coarse), Some(coords)) => {
                let coarse = coarse?;
                let cc = coarse.coords.as_ref().expect("generators attach coordinates");
                let mapped = points
                    .iter()
                    .map(|&p| {
                        let sq = |q: &Vec<f64>| q.iter().zip(&coords[p]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                        (0..cc.len()).min_by(|&a, &b| sq(&cc[a]).total_cmp(&sq(&cc[b]))).expect("nonempty")
                    })
                    .collect();
                Ok((coarse, mapped))
            }
            _ => {
                let (coarse, rep) = self.half_resolution()?;
                Ok((coarse, points.iter().map(|&p| rep[p]).collect()))
            }
        }
    }

    fn coarsen(&self, kept: &[usize], generator: &str) -> Result<(Self, Vec<usize>)> {
        let m = kept.len();
        let mut slot = vec![usize::MAX; self.n];
        for (a, &i) in kept.iter().enumerate() {
            slot[i] = a;
        }
        let mut rep = vec![0usize; self.n];
        let mut mass = vec![0.0; m];
        for i in 0..self.n {
            let k = if slot[i] != usize::MAX {
                slot[i]
            } else {
                (0..m)
                    .min_by(|&a, &b| self.dist(i, kept[a]).total_cmp(&self.dist(i, kept[b])))
                    .expect("nonempty")
            };
            rep[i] = k;
            mass[k] += self.mass[i];
        }
        let mut dist = vec![0.0; m * m];
        for (a, &i) in kept.iter().enumerate() {
            for (b, &j) in kept.iter().enumerate() {
                dist[a * m + b] = self.dist(i, j);
            }
        }
        let coords = self.coords.as_ref().map(|c| kept.iter().map(|&i| c[i].clone()).collect());
        let mut out = Self::new(dist, mass)?
            .with_name(format!("{}-half", self.name))
            .with_meta(
                generator,
                serde_json::json!({ "parent": self.meta.generator, "n_parent": self.n }),
            );
        out.coords = coords;
        Ok((out, rep))
    }

    pub fn to_file(&self) -> SpaceFile {
        SpaceFile {
            name: self.name.clone(),
            n: self.n,
            dist: self.dist.clone(),
            mass: self.mass.clone(),
            labels: self.labels.clone(),
            coords: self.coords.clone(),
            meta: self.meta.clone(),
            cone: None,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file().save(path)
    }

    /// Loads and re-validates (strict) a space file.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        SpaceFile::load(path)?.into_space()
    }
}

/// On-disk JSON layout of a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFile {
    pub name: String,
    pub n: usize,
    /// Row-major `n²` distances.
    pub dist: Vec<f64>,
    pub mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub meta: SpaceMeta,
    /// Present when the file describes a cone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone: Option<serde_json::Value>,
}

impl SpaceFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    pub fn into_space(self) -> Result<FiniteMMSpace> {
        if self.n != self.mass.len() {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: self.mass.len(),
            });
        }
        let mut space = FiniteMMSpace::new(self.dist, self.mass)?.with_name(self.name);
        space.meta = self.meta;
        if let Some(l) = self.labels {
            space = space.with_labels(l)?;
        }
        if let Some(c) = self.coords {
            space = space.with_coords(c)?;
        }
        let report = validate_space(&space, true);
        if !report.is_valid() {
            return Err(Error::InvalidSpace(report.to_string()));
        }
        Ok(space)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Diagonal,
    Symmetry,
    Triangle,
    TotalMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Worst offending indices (pair or triple).
    pub indices: Vec<usize>,
    pub magnitude: f64,
    /// Number of offending pairs/triples found.
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// `true` when triangles were sampled rather than enumerated.
    pub triangle_sampled: bool,
    pub strict: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn worst(&self, kind: ViolationKind) -> Option<&Violation> {
        self.violations.iter().find(|v| v.kind == kind)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(
                f,
                "{:?} violation x{} at {:?}, magnitude {:.3e}",
                v.kind, v.count, v.indices, v.magnitude
            )?;
        }
        Ok(())
    }
}

fn tol_for(scale: f64) -> f64 {
    1e-9 * (1.0 + scale)
}

struct Worst {
    indices: Vec<usize>,
    magnitude: f64,
    count: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            indices: vec![],
            magnitude: 0.0,
            count: 0,
        }
    }
    fn record(&mut self, mag: f64, idx: &[usize]) {
        self.count += 1;
        if mag > self.magnitude {
            self.magnitude = mag;
            self.indices = idx.to_vec();
        }
    }
    fn into_violation(self, kind: ViolationKind) -> Option<Violation> {
        (self.count > 0).then_some(Violation {
            kind,
            indices: self.indices,
            magnitude: self.magnitude,
            count: self.count,
        })
    }
}

/// Checks every metric-measure invariant. In strict mode the scan stops at
/// the first violated invariant.
pub fn validate_space<S: MetricMeasure + ?Sized>(space: &S, strict: bool) -> ValidationReport {
    let n = space.len();
    let mut report = ValidationReport {
        strict,
        ..Default::default()
    };
    let scale = (0..n).map(|i| space.dist(0, i)).fold(0.0, f64::max);
    let tol = tol_for(scale);

    let mut diag = Worst::new();
    for i in 0..n {
        let d = space.dist(i, i).abs();
        if d > tol {
            diag.record(d, &[i, i]);
        }
    }
    if let Some(v) = diag.into_violation(ViolationKind::Diagonal) {
        report.violations.push(v);
        if strict {
            return report;
        }
    }

    let mut sym = Worst::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = (space.dist(i, j) - space.dist(j, i)).abs();
            if d > tol {
                sym.record(d, &[i, j]);
            }
        }
    }
    if let Some(v) = sym.into_violation(ViolationKind::Symmetry) {
        report.violations.push(v);
        if strict {
            return report;
        }
    }

    if space.total_mass() <= 0.0 {
        report.violations.push(Violation {
            kind: ViolationKind::TotalMass,
            indices: vec![],
            magnitude: space.total_mass(),
            count: 1,
        });
        if strict {
            return report;
        }
    }

    let tri = if n <= EXHAUSTIVE_TRIANGLE_LIMIT {
        triangle_exhaustive(space, tol)
    } else {
        report.triangle_sampled = true;
        triangle_sampled(space, tol, SAMPLED_TRIPLES, 0x5eed)
    };
    if let Some(v) = tri.into_violation(ViolationKind::Triangle) {
        report.violations.push(v);
    }
    report
}

fn triangle_exhaustive<S: MetricMeasure + ?Sized>(space: &S, tol: f64) -> Worst {
    let n = space.len();
    let partial: Vec<Worst> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut w = Worst::new();
            for j in 0..n {
                let dij = space.dist(i, j);
                for k in 0..n {
                    let excess = space.dist(i, k) - dij - space.dist(j, k);
                    if excess > tol {
                        w.record(excess, &[i, j, k]);
                    }
                }
            }
            w
        })
        .collect();
    let mut out = Worst::new();
    for w in partial {
        out.count += w.count;
        if w.magnitude > out.magnitude {
            out.magnitude = w.magnitude;
            out.indices = w.indices;
        }
    }
    out
}

fn triangle_sampled<S: MetricMeasure + ?Sized>(space: &S, tol: f64, samples: usize, seed: u64) -> Worst {
    let n = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Worst::new();
    for _ in 0..samples {
        let (i, j, k) = (
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
        );
        let excess = space.dist(i, k) - space.dist(i, j) - space.dist(j, k);
        if excess > tol {
            w.record(excess, &[i, j, k]);
        }
    }
    w
}

/// Largest triangle-inequality excess over `samples` random triples.
pub fn max_triangle_excess<S: MetricMeasure + ?Sized>(space: &S, samples: usize, seed: u64) -> f64 {
    triangle_sampled(space, f64::NEG_INFINITY, samples, seed).magnitude
}

// ---------------------------------------------------------------------------
// Measures

/// A probability vector over the points of a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMeasure {
    weights: Vec<f64>,
}

/// Tolerance on `|Σ w − 1|` for [`ProbMeasure::new`].
pub const PROB_SUM_TOL: f64 = 1e-12;

impl ProbMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty weight vector".into()));
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure(format!(
                "weight {k} = {} is not a finite nonnegative number",
                weights[k]
            )));
        }
        let s = pairwise_sum(&weights);
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {s}, expected 1")));
        }
        Ok(Self { weights })
    }

    /// Rescales nonnegative weights to total 1. Entries in `[-1e-12, 0)`
    /// (roundoff of positive quantities) are clamped to zero.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        for w in weights.iter_mut() {
            if *w < 0.0 && *w >= -1e-12 {
                *w = 0.0;
            }
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure(format!(
                "weight {k} = {} is not a finite nonnegative number",
                weights[k]
            )));
        }
        let s = pairwise_sum(&weights);
        if s <= 0.0 {
            return Err(Error::InvalidMeasure("weights have zero total".into()));
        }
        weights.iter_mut().for_each(|w| *w /= s);
        Ok(Self { weights })
    }

    pub fn dirac(n: usize, at: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        Self { weights }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// The normalized reference measure of `space`.
    pub fn from_space<S: MetricMeasure + ?Sized>(space: &S) -> Self {
        Self::normalized(space.mass().to_vec()).expect("space masses are validated")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `∫ f dμ`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        crate::numeric::dot(&self.weights, f)
    }
}

// ---------------------------------------------------------------------------
// Distance histogram

/// `m ⊗ m`-weighted histogram of pairwise distances on `[0, diameter]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl DistanceHistogram {
    /// Bin masses divided by their total.
    pub fn normalized(&self) -> Vec<f64> {
        let s = pairwise_sum(&self.masses);
        self.masses.iter().map(|m| m / s).collect()
    }
}

pub fn distance_histogram<S: MetricMeasure + ?Sized>(space: &S, bins: usize) -> Result<DistanceHistogram> {
    histogram_on(space, bins, space.diameter())
}

/// Histogram on `[0, upper]`; distances above `upper` land in the last bin.
pub fn histogram_on<S: MetricMeasure + ?Sized>(space: &S, bins: usize, upper: f64) -> Result<DistanceHistogram> {
    if bins == 0 {
        return Err(invalid("bins", "must be at least 1"));
    }
    let n = space.len();
    let mass = space.mass();
    let width = if upper > 0.0 { upper / bins as f64 } else { 1.0 };
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut h = vec![0.0; bins];
            for j in 0..n {
                let b = ((space.dist(i, j) / width) as usize).min(bins - 1);
                h[b] += mass[i] * mass[j];
            }
            h
        })
        .collect();
    let masses = (0..bins)
        .map(|b| pairwise_sum(&rows.iter().map(|r| r[b]).collect::<Vec<_>>()))
        .collect();
    let edges = (0..=bins).map(|k| k as f64 * width).collect();
    Ok(DistanceHistogram { edges, masses })
}

// ---------------------------------------------------------------------------
// Model generators

/// `n` equispaced points on a circle of the given circumference with the
/// arc-length metric and uniform probability mass.
pub fn circle(circumference: f64, n: usize) -> Result<FiniteMMSpace> {
    if !(circumference > 0.0) || !circumference.is_finite() {
        return Err(invalid("circumference", "must be positive"));
    }
    if n < 3 {
        return Err(invalid("n", "circle needs at least 3 points"));
    }
    let step = circumference / n as f64;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let k = (i as isize - j as isize).unsigned_abs();
            let k = k.min(n - k);
            dist[i * n + j] = k as f64 * step;
        }
    }
    let coords = (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            vec![a.cos(), a.sin()]
        })
        .collect();
    FiniteMMSpace::new(dist, vec![1.0 / n as f64; n])?
        .with_name(format!("circle-{n}"))
        .with_meta(
            "circle",
            serde_json::json!({ "circumference": circumference, "n": n }),
        )
        .with_coords(coords)
}

/// The one-dimensional model `([0, π], |·|, sin^{N−1}(r) dr)` on `n` cell
/// midpoints; each cell carries its exact (quadrature) mass, normalized.
pub fn interval_model(dim: f64, n: usize) -> Result<FiniteMMSpace> {
    if !(dim >= 1.0) {
        return Err(invalid("N", "must be at least 1"));
    }
    if n < 2 {
        return Err(invalid("n", "interval model needs at least 2 points"));
    }
    let h = PI / n as f64;
    let nodes: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let mut mass = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
        mass.push(if dim == 1.0 { h } else { quad(|t| t.sin().powf(dim - 1.0), a, b)? });
    }
    // enforce the reflection symmetry of sin^{N-1} about π/2 exactly
    for i in 0..n / 2 {
        let s = 0.5 * (mass[i] + mass[n - 1 - i]);
        mass[i] = s;
        mass[n - 1 - i] = s;
    }
    let total = pairwise_sum(&mass);
    mass.iter_mut().for_each(|m| *m /= total);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = (nodes[i] - nodes[j]).abs();
        }
    }
    FiniteMMSpace::new(dist, mass)?
        .with_name(format!("interval-N{dim}-{n}"))
        .with_meta("interval_model", serde_json::json!({ "N": dim, "n": n }))
        .with_coords(nodes.iter().map(|&r| vec![r]).collect())
}

/// Unnormalized `∫_0^π sin^{N−1}`, used by tests and model values.
pub fn interval_model_total_mass(dim: f64) -> Result<f64> {
    quad(|t| t.sin().powf(dim - 1.0), 0.0, PI)
}

/// Unit vectors of the `n`-point Fibonacci lattice on S².
pub fn fibonacci_points(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Angle between unit vectors, accurate at both small and near-π angles.
pub fn great_circle_angle(u: &[f64; 3], v: &[f64; 3]) -> f64 {
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let d = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    c.atan2(d)
}

/// Near-uniform sample of the round sphere `S^N(radius)`: `N = 1` is the
/// circle of circumference `2π·radius`, `N = 2` the Fibonacci lattice.
pub fn sphere_fibonacci(dim: u32, radius: f64, n: usize) -> Result<FiniteMMSpace> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid("radius", "must be positive"));
    }
    match dim {
        1 => circle(2.0 * PI * radius, n),
        2 => {
            if n < 12 {
                return Err(invalid("n", "Fibonacci sphere needs at least 12 points"));
            }
            let pts = fibonacci_points(n);
            let mut dist = vec![0.0; n * n];
            dist.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for (j, d) in row.iter_mut().enumerate() {
                    *d = if i == j { 0.0 } else { radius * great_circle_angle(&pts[i], &pts[j]) };
                }
            });
            FiniteMMSpace::new(dist, vec![1.0 / n as f64; n])?
                .with_name(format!("sphere2-r{radius}-{n}"))
                .with_meta(
                    "sphere_fibonacci",
                    serde_json::json!({ "N": 2, "radius": radius, "n": n }),
                )
                .with_coords(pts.iter().map(|p| p.iter().map(|c| c * radius).collect()).collect())
        }
        _ => Err(invalid(
            "N",
            format!("sphere_fibonacci supports N = 1 or 2, got {dim}; use iterated suspension"),
        )),
    }
}

/// Riemannian product `X × Y` with `d = sqrt(d_X² + d_Y²)` and the
/// normalized product measure. Point `(i, j)` has index `i·|Y| + j`.
pub fn product_space(x: &FiniteMMSpace, y: &FiniteMMSpace, size_cap: usize) -> Result<FiniteMMSpace> {
    let (nx, ny) = (x.len(), y.len());
    let n = nx * ny;
    if n > size_cap {
        return Err(Error::SizeCap { size: n, cap: size_cap });
    }
    let (tx, ty) = (x.total_mass(), y.total_mass());
    let mut mass = Vec::with_capacity(n);
    for i in 0..nx {
        for j in 0..ny {
            mass.push(x.mass()[i] / tx * y.mass()[j] / ty);
        }
    }
    let mut dist = vec![0.0; n * n];
    dist.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let (i, j) = (p / ny, p % ny);
        for (q, d) in row.iter_mut().enumerate() {
            let (k, l) = (q / ny, q % ny);
            *d = x.dist(i, k).hypot(y.dist(j, l));
        }
    });
    FiniteMMSpace::new(dist, mass)?
        .with_name(format!("{}x{}", x.name(), y.name()))
        .with_meta(
            "product_space",
            serde_json::json!({ "factors": [x.meta().generator, y.meta().generator], "sizes": [nx, ny] }),
        )
        .with_labels((0..n).map(|p| format!("{},{}", p / ny, p % ny)).collect())
}

/// All-pairs shortest paths over the given distance table, turning any
/// symmetric nonnegative table into a metric.
pub fn repair_metric(space: &FiniteMMSpace) -> Result<FiniteMMSpace> {
    let n = space.len();
    let mut d = space.dist_table().to_vec();
    for k in 0..n {
        let dk: Vec<f64> = d[k * n..(k + 1) * n].to_vec();
        d.par_chunks_mut(n).for_each(|row| {
            let dik = row[k];
            for j in 0..n {
                let via = dik + dk[j];
                if via < row[j] {
                    row[j] = via;
                }
            }
        });
    }
    let mut out = space.clone();
    out.dist = d;
    Ok(out)
}

/// Multiplies every distance by `1 + eta·u_ij` with `u_ij` uniform on
/// `[−1, 1]` (symmetric, seeded), then repairs the metric.
pub fn perturb_metric(space: &FiniteMMSpace, eta: f64, seed: u64) -> Result<FiniteMMSpace> {
    let n = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = space.dist_table().to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let v = d[i * n + j] * (1.0 + eta * u);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut raw = space.clone();
    raw.dist = d;
    let mut out = repair_metric(&raw)?;
    out.meta = SpaceMeta {
        generator: "perturb_metric".into(),
        params: serde_json::json!({ "parent": space.meta.generator, "eta": eta, "seed": seed }),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(d01: f64, d10: f64) -> FiniteMMSpace {
        FiniteMMSpace::new(vec![0.0, d01, d10, 0.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn minimal_space_is_valid() {
        assert!(validate_space(&two_point(1.0, 1.0), true).is_valid());
    }

    #[test]
    fn asymmetry_is_reported() {
        let r = validate_space(&two_point(1.0, 2.0), false);
        let v = r.worst(ViolationKind::Symmetry).expect("symmetry violation");
        assert_eq!(v.indices, vec![0, 1]);
        assert!((v.magnitude - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_violation_magnitude() {
        let d = vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0];
        let s = FiniteMMSpace::new(d, vec![1.0; 3]).unwrap();
        let r = validate_space(&s, false);
        let v = r.worst(ViolationKind::Triangle).expect("triangle violation");
        // d(0,2) - d(0,1) - d(1,2) = 5 - 2
        assert!((v.magnitude - 3.0).abs() < 1e-12);
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn strict_mode_stops_at_first_violation() {
        let d = vec![0.5, 1.0, 5.0, 2.0, 0.0, 1.0, 5.0, 1.0, 0.0];
        let s = FiniteMMSpace::new(d, vec![1.0; 3]).unwrap();
        assert_eq!(validate_space(&s, true).violations.len(), 1);
        assert!(validate_space(&s, false).violations.len() >= 3);
    }

    #[test]
    fn constructor_rejects_bad_entries() {
        assert!(FiniteMMSpace::new(vec![0.0, f64::NAN, 1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(FiniteMMSpace::new(vec![0.0, -1.0, -1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![1.0, -1.0]).is_err());
        assert!(FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(FiniteMMSpace::new(vec![0.0; 3], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn circle_quarter_points() {
        let c = circle(2.0 * PI, 4).unwrap();
        for &d in c.dist_table() {
            assert!([0.0, PI / 2.0, PI].iter().any(|v| (d - v).abs() < 1e-12), "{d}");
        }
        assert!((c.diameter() - PI).abs() < 1e-12);
    }

    #[test]
    fn short_circle_diameter() {
        let c = circle(4.0 * PI / 3.0, 1000).unwrap();
        assert!((c.diameter() - 2.0 * PI / 3.0).abs() < 1e-12);
        assert!(c.diameter() < PI);
    }

    #[test]
    fn circle_rejects_bad_parameters() {
        assert!(circle(0.0, 10).is_err());
        assert!(circle(-1.0, 10).is_err());
        assert!(circle(1.0, 2).is_err());
    }

    #[test]
    fn interval_flat_weight_for_n1() {
        let s = interval_model(1.0, 16).unwrap();
        for &m in s.mass() {
            assert!((m - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn interval_total_mass_n2() {
        // ∫_0^π sin = 2
        assert!((interval_model_total_mass(2.0).unwrap() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn interval_mass_reversal_symmetry() {
        let s = interval_model(3.0, 101).unwrap();
        let m = s.mass();
        for i in 0..101 {
            assert!((m[i] - m[100 - i]).abs() < 1e-12);
        }
        assert!(interval_model(0.5, 10).is_err());
    }

    #[test]
    fn fibonacci_sphere_resolution() {
        let s = sphere_fibonacci(2, 1.0, 2000).unwrap();
        let gap = (0..s.len())
            .map(|i| {
                s.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, d)| *d)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        assert!(gap <= 0.1, "max nearest-neighbour gap {gap}");
        let diam = s.diameter();
        assert!(diam <= PI + 1e-12 && diam > PI - 0.1, "{diam}");
    }

    #[test]
    fn scaled_sphere_diameter() {
        let r = 1.0 / 3f64.sqrt();
        let s = sphere_fibonacci(2, r, 300).unwrap();
        assert!(s.diameter() <= PI * r + 1e-12);
        assert!(sphere_fibonacci(3, 1.0, 100).is_err());
        assert!(sphere_fibonacci(2, 1.0, 11).is_err());
    }

    #[test]
    fn product_of_two_point_spaces() {
        let a = two_point(1.0, 1.0);
        let p = product_space(&a, &a, 100).unwrap();
        assert!((p.diameter() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn product_measure_weights() {
        let a = FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let b = FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let p = product_space(&a, &b, 100).unwrap();
        let want = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0];
        for (m, w) in p.mass().iter().zip(want) {
            assert!((m - w).abs() < 1e-15);
        }
        assert!(matches!(product_space(&a, &b, 3), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn product_of_small_spheres_diameter() {
        let s = sphere_fibonacci(2, 1.0 / 3f64.sqrt(), 60).unwrap();
        let p = product_space(&s, &s, DEFAULT_SIZE_CAP).unwrap();
        assert!(p.diameter() <= PI * (2.0f64 / 3.0).sqrt() + 1e-12);
        assert!(max_triangle_excess(&p, 20_000, 3) <= 1e-12);
    }

    #[test]
    fn histogram_two_points() {
        let s = FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![0.5, 0.5]).unwrap();
        let h = distance_histogram(&s, 2).unwrap();
        // pairs (0,0),(1,1) at distance 0; (0,1),(1,0) at distance 1
        assert!((h.masses[0] - 0.5).abs() < 1e-15);
        assert!((h.masses[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn histogram_single_bin_total() {
        let s = interval_model(2.0, 40).unwrap().with_mass(vec![0.3; 40]).unwrap();
        let h = distance_histogram(&s, 1).unwrap();
        assert!((h.masses[0] - (0.3f64 * 40.0).powi(2)).abs() < 1e-10);
        assert!(distance_histogram(&s, 0).is_err());
    }

    #[test]
    fn histogram_circle_is_uniform() {
        // arc distance of two uniform points on a circle of length 2π is uniform on [0, π]
        let s = circle(2.0 * PI, 1000).unwrap();
        let h = distance_histogram(&s, 10).unwrap();
        for m in h.normalized() {
            assert!((m - 0.1).abs() < 2e-3, "{m}");
        }
    }

    #[test]
    fn measures() {
        assert!(ProbMeasure::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbMeasure::new(vec![0.5, 0.6]).is_err());
        assert!(ProbMeasure::new(vec![1.5, -0.5]).is_err());
        let m = ProbMeasure::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
        assert_eq!(ProbMeasure::dirac(3, 1).weights(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn json_round_trip_revalidates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = circle(2.0 * PI, 12).unwrap();
        c.save_json(&p).unwrap();
        let back = FiniteMMSpace::load_json(&p).unwrap();
        assert_eq!(back, c);

        let mut bad = c.to_file();
        bad.dist[1] = 10.0;
        bad.dist[12] = 10.0;
        bad.save(&p).unwrap();
        assert!(FiniteMMSpace::load_json(&p).is_err());
    }

    #[test]
    fn half_resolution_conserves_mass() {
        let c = circle(2.0 * PI, 20).unwrap();
        let (h, rep) = c.half_resolution().unwrap();
        assert_eq!(h.len(), 10);
        assert!((h.total_mass() - 1.0).abs() < 1e-14);
        assert_eq!(rep[4], 2);
    }

    #[test]
    fn coarse_rerun_regenerates_samples() {
        let s = sphere_fibonacci(2, 1.0, 300).unwrap();
        let (h, map) = s.coarse_rerun_space(&[0, 77]).unwrap();
        assert_eq!(h.len(), 150);
        assert_eq!(h.meta().generator, "sphere_fibonacci");
        assert!((h.dist(map[0], map[1]) - s.dist(0, 77)).abs() < 0.2);
        let c = circle(3.0, 20).unwrap();
        let (h, map) = c.coarse_rerun_space(&[4]).unwrap();
        assert_eq!((h.len(), map[0]), (10, 2));
        let plain = FiniteMMSpace::new(c.dist_table().to_vec(), vec![1.0; 20]).unwrap();
        let (h, map) = plain.coarse_rerun_space(&[5]).unwrap();
        assert_eq!(h.len(), 10);
        assert!(map[0] == 2 || map[0] == 3);
    }

    #[test]
    fn repair_restores_triangle_inequality() {
        let d = vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0];
        let s = FiniteMMSpace::new(d, vec![1.0; 3]).unwrap();
        let r = repair_metric(&s).unwrap();
        assert_eq!(r.dist(0, 2), 2.0);
        assert!(validate_space(&r, true).is_valid());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn generators_pass_strict_validation(n in 3usize..60, c in 0.5f64..8.0, dim in 1.0f64..4.0) {
                prop_assert!(validate_space(&circle(c, n).unwrap(), true).is_valid());
                prop_assert!(validate_space(&interval_model(dim, n).unwrap(), true).is_valid());
            }

            #[test]
            fn interval_reversal_invariance(dim in 1.0f64..6.0, n in 2usize..80) {
                let s = interval_model(dim, n).unwrap();
                let m = s.mass();
                for i in 0..n {
                    prop_assert!((m[i] - m[n - 1 - i]).abs() <= 1e-12);
                }
            }

            #[test]
            fn products_of_metrics_are_metrics(n1 in 3usize..12, n2 in 3usize..12, c in 1.0f64..7.0) {
                let p = product_space(&circle(c, n1).unwrap(), &interval_model(2.0, n2).unwrap(), 1000).unwrap();
                prop_assert!(max_triangle_excess(&p, 5000, 11) <= 1e-12);
            }
        }
    }
}
