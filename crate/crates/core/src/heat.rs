//! Heat semigroups on finite spaces, the dual flow on measures, and the
//! radial Bessel model used on cones.
//!
//! Generators are stored as sparse rows of off-diagonal rates plus a
//! diagonal chosen so rows sum to zero. Every model is self-adjoint in the
//! inner product weighted by its (normalized) masses. Semigroups are
//! evaluated either from a dense spectral decomposition of the symmetrized
//! generator or by uniformization, which is a convex combination of powers
//! of a stochastic matrix and therefore preserves positivity exactly.

use std::collections::VecDeque;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ConeSpace, GridSpec, RadialGrid};
use crate::mmspace::{FiniteMMSpace, MetricMeasure, ProbMeasure};
use crate::numeric::pairwise_sum;
use crate::quadrature::quad;

/// Largest model evaluated by dense spectral decomposition under
/// [`EvalMethod::Auto`].
pub const SPECTRAL_LIMIT: usize = 2000;

/// Kernel entries below this value are dropped from graph generators.
pub const KERNEL_CUTOFF: f64 = 1e-14;

/// Environment variable naming a directory for cached spectral data.
pub const CACHE_ENV: &str = "RICCILAB_CACHE";

/// Negative entries of a computed heat measure beyond this are reported as
/// a solver failure instead of being clamped.
const NEGATIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMethod {
    /// Spectral up to [`SPECTRAL_LIMIT`] points, uniformization beyond.
    Auto,
    Spectral,
    Uniformization,
}

/// How a model's generator was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Gaussian-kernel graph generator with bandwidth `eps`.
    Graph { eps: f64 },
    /// Three-point discretization of `(1/w)(w u')'` on `[0, π]` with
    /// `w = sin^{N-1}`.
    SturmInterval { dim: f64 },
    /// Same on a half-line grid with `w = r^N`, reflecting at the far end.
    SturmHalfLine { dim: f64 },
}

/// Sparse rows of off-diagonal rates.
#[derive(Debug, Clone)]
struct SparseRows {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SparseRows {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag = Vec::with_capacity(rows.len());
        for row in rows {
            let mut off = Vec::with_capacity(row.len());
            for (j, v) in row {
                cols.push(j);
                vals.push(v);
                off.push(v);
            }
            diag.push(-pairwise_sum(&off));
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols, vals, diag }
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Eigen-decomposition of the symmetrized generator
/// `S = M^{1/2} L M^{-1/2}`, eigenvectors stored row-major (`u[i * n + k]`).
#[derive(Debug)]
struct Spectral {
    values: Vec<f64>,
    u: Vec<f64>,
}

/// A heat semigroup `e^{tL}` on a finite space with normalized masses `m`.
#[derive(Debug)]
pub struct HeatModel {
    kind: GeneratorKind,
    mass: Vec<f64>,
    rows: SparseRows,
    method: EvalMethod,
    /// Positions of the points for one-dimensional (Sturm) models.
    positions: Option<Vec<f64>>,
    spectral: OnceLock<Arc<Spectral>>,
}

impl HeatModel {
    fn assemble(kind: GeneratorKind, mass: Vec<f64>, rows: Vec<Vec<(usize, f64)>>, positions: Option<Vec<f64>>) -> Self {
        Self {
            kind,
            mass,
            rows: SparseRows::from_rows(rows),
            method: EvalMethod::Auto,
            positions,
            spectral: OnceLock::new(),
        }
    }

    pub fn with_method(mut self, method: EvalMethod) -> Self {
        self.method = method;
        self
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    /// Normalized reference masses.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Bandwidth of a graph generator.
    pub fn bandwidth(&self) -> Option<f64> {
        match self.kind {
            GeneratorKind::Graph { eps } => Some(eps),
            _ => None,
        }
    }

    /// Point positions of a one-dimensional model.
    pub fn positions(&self) -> Option<&[f64]> {
        self.positions.as_deref()
    }

    /// The method actually used for evaluation.
    pub fn method(&self) -> EvalMethod {
        match self.method {
            EvalMethod::Auto if self.len() <= SPECTRAL_LIMIT => EvalMethod::Spectral,
            EvalMethod::Auto => EvalMethod::Uniformization,
            m => m,
        }
    }

    /// Generator entry `L[i][j]`.
    pub fn generator(&self, i: usize, j: usize) -> f64 {
        self.rows.entry(i, j)
    }

    pub fn nonzeros(&self) -> usize {
        self.rows.nnz() + self.len()
    }

    /// `(L v)_i`.
    pub fn apply_generator(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.rows.diag[i] * v[i] + self.rows.row(i).map(|(j, a)| a * v[j]).sum::<f64>())
            .collect()
    }

    /// Largest violation of `m_i L_ij = m_j L_ji`, of nonnegative
    /// off-diagonal rates, and of zero row sums, in that order.
    pub fn invariant_defects(&self) -> (f64, f64, f64) {
        let n = self.len();
        let mut sym: f64 = 0.0;
        let mut neg: f64 = 0.0;
        let mut rowsum: f64 = 0.0;
        for i in 0..n {
            let mut s = self.rows.diag[i];
            for (j, a) in self.rows.row(i) {
                s += a;
                neg = neg.max(-a);
                let back = self.rows.entry(j, i);
                sym = sym.max((self.mass[i] * a - self.mass[j] * back).abs());
            }
            rowsum = rowsum.max(s.abs());
        }
        (sym, neg.max(0.0), rowsum)
    }

    /// One-dimensional models as a metric measure space on their positions.
    pub fn line_space(&self) -> Option<FiniteMMSpace> {
        let pos = self.positions.as_ref()?;
        let n = pos.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = (pos[i] - pos[j]).abs();
            }
        }
        FiniteMMSpace::new(dist, self.mass.clone()).ok()
    }

    fn spectral(&self) -> Result<Arc<Spectral>> {
        if let Some(s) = self.spectral.get() {
            return Ok(s.clone());
        }
        let computed = Arc::new(self.load_or_decompose()?);
        Ok(self.spectral.get_or_init(|| computed).clone())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.len().hash(&mut h);
        for m in &self.mass {
            m.to_bits().hash(&mut h);
        }
        self.rows.row_ptr.hash(&mut h);
        self.rows.cols.hash(&mut h);
        for v in self.rows.vals.iter().chain(&self.rows.diag) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn cache_path(&self) -> Option<PathBuf> {
        let dir = std::env::var_os(CACHE_ENV)?;
        Some(PathBuf::from(dir).join(format!("spectral-{:016x}.bin", self.fingerprint())))
    }

    fn load_or_decompose(&self) -> Result<Spectral> {
        let path = self.cache_path();
        if let Some(p) = &path {
            if let Some(s) = read_spectral(p, self.len()) {
                log::debug!("spectral cache hit {}", p.display());
                return Ok(s);
            }
        }
        let s = self.decompose()?;
        if let Some(p) = &path {
            if let Err(e) = write_spectral(p, &s) {
                log::warn!("could not write spectral cache {}: {e}", p.display());
            }
        }
        Ok(s)
    }

    fn decompose(&self) -> Result<Spectral> {
        let n = self.len();
        let sq: Vec<f64> = self.mass.iter().map(|m| m.sqrt()).collect();
        let mut dense = faer::Mat::<f64>::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = self.rows.diag[i];
            for (j, a) in self.rows.row(i) {
                // average the two halves so the matrix is symmetric to the bit
                let b = self.rows.entry(j, i);
                dense[(i, j)] = 0.5 * (self.mass[i] * a + self.mass[j] * b) / (sq[i] * sq[j]);
            }
        }
        let eig = dense
            .self_adjoint_eigen(faer::Side::Lower)
            .map_err(|e| Error::Solver(format!("eigendecomposition failed: {e:?}")))?;
        let s = eig.S().column_vector();
        let uref = eig.U();
        let values: Vec<f64> = (0..n).map(|k| s[k]).collect();
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                u[i * n + k] = uref[(i, k)];
            }
        }
        Ok(Spectral { values, u })
    }

    /// Eigenvalues of `-L` in increasing order (`0` first on a connected
    /// space).
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        let s = self.spectral()?;
        let mut v: Vec<f64> = s.values.iter().map(|x| -x).collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    /// Smallest nonzero eigenvalue of `-L`.
    pub fn spectral_gap(&self) -> Result<f64> {
        let s = self.spectrum()?;
        s.get(1).copied().ok_or_else(|| invalid("model", "needs at least two points"))
    }

    /// `e^{tL} v`.
    pub fn apply(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: v.len() });
        }
        if t == 0.0 {
            return Ok(v.to_vec());
        }
        match self.method() {
            EvalMethod::Spectral => {
                let s = self.spectral()?;
                let n = self.len();
                let sq: Vec<f64> = self.mass.iter().map(|m| m.sqrt()).collect();
                // coefficients e^{tλ_k} <u_k, M^{1/2} v>
                let coef: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|k| {
                        let c: f64 = (0..n).map(|i| s.u[i * n + k] * sq[i] * v[i]).sum();
                        c * (t * s.values[k]).exp()
                    })
                    .collect();
                Ok((0..n)
                    .into_par_iter()
                    .map(|i| crate::numeric::dot(&s.u[i * n..(i + 1) * n], &coef) / sq[i])
                    .collect())
            }
            _ => Ok(self.uniformize(t, v)),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(invalid("t", format!("time must be finite and nonnegative, got {t}")));
        }
        Ok(())
    }

    fn uniformize(&self, t: f64, v: &[f64]) -> Vec<f64> {
        let rate = self.rows.diag.iter().fold(0.0f64, |a, d| a.max(-d)).max(1e-300);
        let total = rate * t;
        // keep each Poisson window small enough that e^{-a} does not underflow
        let steps = (total / 30.0).ceil().max(1.0) as usize;
        let a = total / steps as f64;
        let mut cur = v.to_vec();
        for _ in 0..steps {
            let mut p = (-a).exp();
            let mut cum = p;
            let mut acc: Vec<f64> = cur.iter().map(|x| p * x).collect();
            let mut term = cur.clone();
            let kmax = (a + 20.0 * a.sqrt() + 40.0) as usize;
            for k in 1..=kmax {
                term = self.stochastic_step(&term, rate);
                p *= a / k as f64;
                cum += p;
                acc.iter_mut().zip(&term).for_each(|(x, y)| *x += p * y);
                if 1.0 - cum < 1e-17 {
                    break;
                }
            }
            // the truncated tail is the constant part of P^k 1, so
            // rescaling keeps e^{tL} 1 = 1
            acc.iter_mut().for_each(|x| *x /= cum);
            cur = acc;
        }
        cur
    }

    /// `(I + L / rate) v`, a stochastic matrix when `rate ≥ max |L_ii|`.
    fn stochastic_step(&self, v: &[f64], rate: f64) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let off: f64 = self.rows.row(i).map(|(j, a)| a * v[j]).sum();
                v[i] * (1.0 + self.rows.diag[i] / rate) + off / rate
            })
            .collect()
    }

    /// The dual flow of `δ_x`: weights `m_i (e^{tL})_{i,x} / m_x`.
    pub fn heat_measure(&self, x: usize, t: f64) -> Result<ProbMeasure> {
        self.check_time(t)?;
        let n = self.len();
        if x >= n {
            return Err(invalid("x", format!("point {x} out of range for {n} points")));
        }
        if t == 0.0 {
            return Ok(ProbMeasure::dirac(n, x));
        }
        let w: Vec<f64> = match self.method() {
            EvalMethod::Spectral => {
                let s = self.spectral()?;
                let coef: Vec<f64> = (0..n).map(|k| s.u[x * n + k] * (t * s.values[k]).exp()).collect();
                let mx = self.mass[x];
                (0..n)
                    .into_par_iter()
                    .map(|i| (self.mass[i] / mx).sqrt() * crate::numeric::dot(&s.u[i * n..(i + 1) * n], &coef))
                    .collect()
            }
            _ => {
                let mut e = vec![0.0; n];
                e[x] = 1.0;
                let col = self.uniformize(t, &e);
                let mx = self.mass[x];
                col.iter().zip(&self.mass).map(|(c, m)| m * c / mx).collect()
            }
        };
        clamp_to_measure(w)
    }

    /// [`Self::heat_measure`] over a time grid, evaluated in parallel.
    pub fn heat_measures(&self, x: usize, ts: &[f64]) -> Result<Vec<ProbMeasure>> {
        if self.method() == EvalMethod::Spectral {
            self.spectral()?;
        }
        ts.par_iter().map(|&t| self.heat_measure(x, t)).collect()
    }
}

fn clamp_to_measure(mut w: Vec<f64>) -> Result<ProbMeasure> {
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -NEGATIVITY_TOL {
        return Err(Error::Solver(format!("heat measure has negative weight {min}")));
    }
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    ProbMeasure::normalized(w)
}

fn read_spectral(path: &std::path::Path, n: usize) -> Option<Spectral> {
    let bytes = std::fs::read(path).ok()?;
    let expected = 8 * (1 + n + n * n);
    if bytes.len() != expected {
        return None;
    }
    let mut it = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    if it.next()?.to_bits() != n as u64 {
        return None;
    }
    let values: Vec<f64> = it.by_ref().take(n).collect();
    let u: Vec<f64> = it.collect();
    Some(Spectral { values, u })
}

fn write_spectral(path: &std::path::Path, s: &Spectral) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let n = s.values.len();
    let mut bytes = Vec::with_capacity(8 * (1 + n + n * n));
    bytes.extend_from_slice(&f64::from_bits(n as u64).to_le_bytes());
    for v in s.values.iter().chain(&s.u) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

// ---------------------------------------------------------------------------
// Graph generator

/// `(mean nearest-neighbour distance)²`.
pub fn default_bandwidth<S: MetricMeasure + ?Sized>(space: &S) -> f64 {
    let n = space.len();
    let nn: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| space.dist(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean = pairwise_sum(&nn) / n as f64;
    mean * mean
}

/// Gaussian-kernel generator with density normalization:
/// `K_ij = exp(-d²/(4 eps))`, `q_i = Σ_j K_ij m_j`,
/// `L_ij = K_ij m_j / (eps √(q_i q_j))`. Uses the default bandwidth when
/// `eps` is `None`.
pub fn build_generator_graph<S: MetricMeasure + ?Sized>(space: &S, eps: Option<f64>) -> Result<HeatModel> {
    let n = space.len();
    if n < 2 {
        return Err(invalid("space", "needs at least two points"));
    }
    let eps = match eps {
        Some(e) if e > 0.0 && e.is_finite() => e,
        Some(e) => return Err(invalid("eps", format!("bandwidth must be positive, got {e}"))),
        None => default_bandwidth(space),
    };
    let total = space.total_mass();
    let mass: Vec<f64> = space.mass().iter().map(|m| m / total).collect();
    let kernel: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let d = space.dist(i, j);
                    let k = (-d * d / (4.0 * eps)).exp();
                    (k >= KERNEL_CUTOFF).then_some((j, k))
                })
                .collect()
        })
        .collect();
    let q: Vec<f64> = kernel
        .par_iter()
        .enumerate()
        .map(|(i, row)| mass[i] + row.iter().map(|&(j, k)| k * mass[j]).sum::<f64>())
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = kernel
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .filter(|&(j, _)| mass[j] > 0.0)
                .map(|(j, k)| (j, k * mass[j] / (eps * (q[i] * q[j]).sqrt())))
                .collect()
        })
        .collect();
    if mass.iter().any(|&m| m <= 0.0) {
        return Err(invalid("space", "graph generator needs strictly positive masses"));
    }
    if !connected(&rows) {
        return Err(Error::Disconnected { eps });
    }
    Ok(HeatModel::assemble(GeneratorKind::Graph { eps }, mass, rows, None))
}

fn connected(rows: &[Vec<(usize, f64)>]) -> bool {
    let n = rows.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &(j, _) in &rows[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}

// ---------------------------------------------------------------------------
// Sturm–Liouville models

/// Domain of a one-dimensional model.
#[derive(Debug, Clone, PartialEq)]
pub enum SturmDomain {
    /// `[0, π]` with weight `sin^{N-1}`, split into `n` equal cells.
    Interval,
    /// `[0, r_max]` with weight `r^N` on a uniform grid of `n` levels past
    /// the vertex.
    HalfLine { r_max: f64 },
}

/// Three-point discretization of `L u = (1/w)(w u')'`.
pub fn build_generator_sturm(dim: f64, domain: &SturmDomain, n: usize) -> Result<HeatModel> {
    if n < 16 {
        return Err(invalid("n", format!("need at least 16 cells, got {n}")));
    }
    match domain {
        SturmDomain::Interval => sturm_interval(dim, n),
        SturmDomain::HalfLine { r_max } => {
            let grid = RadialGrid::from_spec(&GridSpec::Linear { count: n, r_max: *r_max })?;
            sturm_half_line(dim, &grid)
        }
    }
}

fn sturm_interval(dim: f64, n: usize) -> Result<HeatModel> {
    if !(dim >= 1.0) || !dim.is_finite() {
        return Err(invalid("N", format!("interval model needs N >= 1, got {dim}")));
    }
    let h = std::f64::consts::PI / n as f64;
    let w = |r: f64| if dim == 1.0 { 1.0 } else { r.sin().max(0.0).powf(dim - 1.0) };
    let nodes: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) * h).collect();
    let cells: Vec<f64> = (0..n)
        .map(|k| quad(w, k as f64 * h, (k + 1) as f64 * h))
        .collect::<Result<_>>()?;
    // interfaces at 0 and π carry no flux
    let cond: Vec<f64> = (1..n).map(|k| w(k as f64 * h) / h).collect();
    Ok(tridiagonal(GeneratorKind::SturmInterval { dim }, nodes, cells, &cond))
}

/// Bessel-type model with weight `r^N` on the levels of `grid`
/// (vertex included), reflecting at `grid.r_max()`. For this weight the
/// scheme satisfies `L s² = 2(N+1)` exactly away from the last cell.
pub fn sturm_half_line(dim: f64, grid: &RadialGrid) -> Result<HeatModel> {
    if !(dim > 0.0) || !dim.is_finite() {
        return Err(invalid("N", format!("half-line model needs N > 0, got {dim}")));
    }
    let levels = grid.levels.clone();
    let m = levels.len();
    if m < 3 {
        return Err(invalid("grid", "needs at least two levels past the vertex"));
    }
    let cells: Vec<f64> = (0..m)
        .map(|k| {
            let (a, b) = grid.cell(k);
            (b.powf(dim + 1.0) - a.powf(dim + 1.0)) / (dim + 1.0)
        })
        .collect();
    let cond: Vec<f64> = (0..m - 1)
        .map(|k| {
            let e = 0.5 * (levels[k] + levels[k + 1]);
            e.powf(dim) / (levels[k + 1] - levels[k])
        })
        .collect();
    Ok(tridiagonal(GeneratorKind::SturmHalfLine { dim }, levels, cells, &cond))
}

/// Rates `L_{k,k+1} = c_k / W_k`, `L_{k+1,k} = c_k / W_{k+1}`.
fn tridiagonal(kind: GeneratorKind, positions: Vec<f64>, cells: Vec<f64>, cond: &[f64]) -> HeatModel {
    let n = cells.len();
    let total = pairwise_sum(&cells);
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|k| {
            let mut row = Vec::with_capacity(2);
            if k > 0 {
                row.push((k - 1, cond[k - 1] / cells[k]));
            }
            if k + 1 < n {
                row.push((k + 1, cond[k] / cells[k]));
            }
            row
        })
        .collect();
    let mass = cells.iter().map(|c| c / total).collect();
    HeatModel::assemble(kind, mass, rows, Some(positions))
}

// ---------------------------------------------------------------------------
// Radial Bessel law

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialParams {
    /// Exponent of the weight `r^N`.
    pub dim: f64,
    /// Start radius (snapped to the grid).
    pub start: f64,
    pub t: f64,
}

/// Law of the radial Bessel model at time `t` on a radial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialLaw {
    pub grid: RadialGrid,
    pub weights: Vec<f64>,
    pub params: RadialParams,
    /// Mass in the last cell, the truncation monitor.
    pub boundary_mass: f64,
}

impl RadialLaw {
    pub fn moment(&self, p: f64) -> f64 {
        let v: Vec<f64> = self
            .grid
            .levels
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| w * r.powf(p))
            .collect();
        pairwise_sum(&v)
    }

    /// Image under `s ↦ λ s` as (positions, weights).
    pub fn scaled(&self, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        (self.grid.levels.iter().map(|r| lambda * r).collect(), self.weights.clone())
    }
}

/// Smallest admissible `R_max` for times up to `t`.
pub fn truncation_radius(dim: f64, t: f64) -> f64 {
    6.0 * ((dim + 1.0) * t).sqrt()
}

/// A half-line model bound to its grid, for repeated evaluation.
#[derive(Debug)]
pub struct BesselModel {
    pub dim: f64,
    pub grid: RadialGrid,
    pub model: HeatModel,
}

impl BesselModel {
    pub fn new(dim: f64, grid: &RadialGrid) -> Result<Self> {
        Ok(Self {
            dim,
            grid: grid.clone(),
            model: sturm_half_line(dim, grid)?,
        })
    }

    pub fn law(&self, r: f64, t: f64) -> Result<RadialLaw> {
        let required = truncation_radius(self.dim, t);
        if self.grid.r_max() < required {
            return Err(Error::Truncation { r_max: self.grid.r_max(), required });
        }
        if !(r >= 0.0) || r > self.grid.r_max() {
            return Err(invalid("r", format!("start radius {r} outside [0, {}]", self.grid.r_max())));
        }
        let k = self.grid.locate(r);
        let mu = self.model.heat_measure(k, t)?;
        let weights = mu.weights().to_vec();
        Ok(RadialLaw {
            boundary_mass: *weights.last().expect("nonempty"),
            grid: self.grid.clone(),
            weights,
            params: RadialParams { dim: self.dim, start: self.grid.levels[k], t },
        })
    }
}

/// Evolves `δ_r` under the half-line model with weight `r^N`.
pub fn bessel_radial_law(dim: f64, r: f64, t: f64, grid: &RadialGrid) -> Result<RadialLaw> {
    BesselModel::new(dim, grid)?.law(r, t)
}

/// Heat flow from the vertex of a flat cone: the radial law from `0`
/// times the normalized base measure.
pub fn vertex_heat_measure(cone: &ConeSpace, t: f64) -> Result<ProbMeasure> {
    if cone.curvature() != 0.0 {
        return Err(Error::CurvedCone(cone.curvature()));
    }
    let law = bessel_radial_law(cone.dimension(), 0.0, t, cone.grid())?;
    cone.product_measure(&law.weights)
}

/// `E[s]` at time 1 from the vertex: `2 Γ(N/2 + 1) / Γ((N+1)/2)`.
pub fn bessel_first_moment_constant(dim: f64) -> f64 {
    2.0 * (ln_gamma(dim / 2.0 + 1.0) - ln_gamma((dim + 1.0) / 2.0)).exp()
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// ---------------------------------------------------------------------------
// Monte-Carlo oracle

/// Sample moments of the simulated radial process at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSample {
    pub t: f64,
    pub first: f64,
    pub second: f64,
    /// Standard error of `second`.
    pub second_stderr: f64,
}

/// Euler–Maruyama for `dX = (N/X) dt + √2 dW`, reflected at `0`, the
/// radial process of `∂_t = L` with weight `r^N`. Deterministic for a seed
/// regardless of thread count.
pub fn bessel_monte_carlo(dim: f64, r0: f64, times: &[f64], paths: usize, dt: f64, seed: u64) -> Result<Vec<MomentSample>> {
    if !(dt > 0.0) || paths < 2 {
        return Err(invalid("monte carlo", "needs dt > 0 and at least two paths"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|t| *t <= 0.0) {
        return Err(invalid("times", "must be positive and strictly increasing"));
    }
    const CHUNK: usize = 1024;
    let chunks = paths.div_ceil(CHUNK);
    let stops: Vec<usize> = times.iter().map(|t| (t / dt).round().max(1.0) as usize).collect();
    let sqrt2dt = (2.0 * dt).sqrt();
    let partial: Vec<Vec<[f64; 3]>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(paths - c * CHUNK);
            let mut sums = vec![[0.0; 3]; times.len()];
            for _ in 0..count {
                let mut x = r0;
                let mut step = 0;
                for (k, &stop) in stops.iter().enumerate() {
                    while step < stop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let drift = if x > 0.0 { dim / x } else { 0.0 };
                        x = (x + drift * dt + sqrt2dt * z).abs();
                        step += 1;
                    }
                    let x2 = x * x;
                    sums[k][0] += x;
                    sums[k][1] += x2;
                    sums[k][2] += x2 * x2;
                }
            }
            sums
        })
        .collect();
    let n = paths as f64;
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let s: [f64; 3] = partial.iter().fold([0.0; 3], |a, p| [a[0] + p[k][0], a[1] + p[k][1], a[2] + p[k][2]]);
            let second = s[1] / n;
            let var = (s[2] / n - second * second).max(0.0);
            MomentSample {
                t,
                first: s[0] / n,
                second,
                second_stderr: (var / (n - 1.0)).sqrt(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Variance bound

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEntry {
    pub point: usize,
    pub t: f64,
    /// `W₂(P̂_t δ_x, δ_x)²`.
    pub w2_sq: f64,
    /// `2 N t`.
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub dim: f64,
    pub rel_tol: f64,
    pub entries: Vec<VarianceEntry>,
    pub worst_ratio: f64,
    pub holds: bool,
}

/// Checks `W₂(P̂_t δ_x, δ_x)² ≤ 2 N t (1 + rel_tol)`. The only coupling with
/// a Dirac mass is the product, so the left side is a second moment.
pub fn variance_bound_check<S: MetricMeasure + ?Sized>(
    space: &S,
    model: &HeatModel,
    dim: f64,
    points: &[usize],
    t_grid: &[f64],
    rel_tol: f64,
) -> Result<VarianceReport> {
    if space.len() != model.len() {
        return Err(Error::DimensionMismatch { expected: model.len(), got: space.len() });
    }
    let mut entries = Vec::with_capacity(points.len() * t_grid.len());
    for &x in points {
        let mus = model.heat_measures(x, t_grid)?;
        for (mu, &t) in mus.iter().zip(t_grid) {
            let terms: Vec<f64> = mu
                .weights()
                .iter()
                .enumerate()
                .map(|(i, w)| w * space.dist(x, i).powi(2))
                .collect();
            let w2_sq = pairwise_sum(&terms);
            let bound = 2.0 * dim * t;
            let ratio = if bound > 0.0 { w2_sq / bound } else if w2_sq == 0.0 { 1.0 } else { f64::INFINITY };
            entries.push(VarianceEntry { point: x, t, w2_sq, bound, ratio });
        }
    }
    let worst_ratio = entries.iter().map(|e| e.ratio).fold(0.0, f64::max);
    Ok(VarianceReport {
        dim,
        rel_tol,
        holds: entries.iter().all(|e| e.w2_sq <= e.bound * (1.0 + rel_tol)),
        entries,
        worst_ratio,
    })
}
