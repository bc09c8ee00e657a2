//! Comparison functions, distortion coefficients, cones and suspensions,
//! and Bishop–Gromov volume profiles.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mmspace::{FiniteMMSpace, MetricMeasure, ProbMeasure, SpaceFile, SpaceMeta};
use crate::numeric::pairwise_sum;
use crate::quadrature::quad;

/// Generalized sine: `sin(√κ θ)/√κ`, `θ`, or `sinh(√−κ θ)/√−κ`.
pub fn s_kappa(kappa: f64, theta: f64) -> f64 {
    if kappa > 0.0 {
        let k = kappa.sqrt();
        (k * theta).sin() / k
    } else if kappa < 0.0 {
        let k = (-kappa).sqrt();
        (k * theta).sinh() / k
    } else {
        theta
    }
}

/// Generalized cosine, the θ-derivative of [`s_kappa`].
pub fn c_kappa(kappa: f64, theta: f64) -> f64 {
    if kappa > 0.0 {
        (kappa.sqrt() * theta).cos()
    } else if kappa < 0.0 {
        ((-kappa).sqrt() * theta).cosh()
    } else {
        1.0
    }
}

/// Distortion coefficient `σ_κ^{(t)}(θ)`. Returns `f64::INFINITY` when
/// `κθ² ≥ π²`.
pub fn sigma(t: f64, kappa: f64, theta: f64) -> f64 {
    let k2 = kappa * theta * theta;
    if k2 >= PI * PI {
        f64::INFINITY
    } else if k2 == 0.0 {
        t
    } else if k2 > 0.0 {
        let a = kappa.sqrt() * theta;
        (t * a).sin() / a.sin()
    } else {
        let a = (-kappa).sqrt() * theta;
        (t * a).sinh() / a.sinh()
    }
}

/// `τ_{K,N}^{(t)}(θ) = t^{1/N} σ_{K/(N−1)}^{(t)}(θ)^{1−1/N}`; `+∞` propagates.
pub fn tau(t: f64, k: f64, n: f64, theta: f64) -> Result<f64> {
    if !(n > 1.0) {
        return Err(invalid("N", "must exceed 1"));
    }
    let s = sigma(t, k / (n - 1.0), theta);
    if s.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(t.powf(1.0 / n) * s.powf(1.0 - 1.0 / n))
}

fn hav(x: f64) -> f64 {
    let s = (0.5 * x).sin();
    s * s
}

// ---------------------------------------------------------------------------
// Radial grids

/// How to lay out the positive radial nodes of a cone or half-line model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// `count` nodes `r_max·k/count`, `k = 1..=count`.
    Linear { count: usize, r_max: f64 },
    /// `count` nodes in geometric progression from `r_min` to `r_max`.
    Geometric { count: usize, r_min: f64, r_max: f64 },
    /// Geometric with ratio `ratio` from `r_min` until the spacing reaches
    /// `h_max`, then uniform up to `r_max`.
    Mixed { r_min: f64, h_max: f64, r_max: f64, ratio: f64 },
}

pub const DEFAULT_MIXED_RATIO: f64 = 1.2;

impl GridSpec {
    pub fn r_max(&self) -> f64 {
        match *self {
            GridSpec::Linear { r_max, .. } | GridSpec::Geometric { r_max, .. } | GridSpec::Mixed { r_max, .. } => {
                r_max
            }
        }
    }

    pub fn nodes(&self) -> Result<Vec<f64>> {
        match *self {
            GridSpec::Linear { count, r_max } => {
                if count < 1 || !(r_max > 0.0) {
                    return Err(invalid("grid", "linear grid needs count ≥ 1 and r_max > 0"));
                }
                Ok((1..=count).map(|k| r_max * k as f64 / count as f64).collect())
            }
            GridSpec::Geometric { count, r_min, r_max } => {
                if count < 2 || !(r_min > 0.0) || !(r_max > r_min) {
                    return Err(invalid("grid", "geometric grid needs count ≥ 2 and 0 < r_min < r_max"));
                }
                let q = (r_max / r_min).powf(1.0 / (count - 1) as f64);
                let mut v: Vec<f64> = (0..count).map(|k| r_min * q.powi(k as i32)).collect();
                v[count - 1] = r_max;
                Ok(v)
            }
            GridSpec::Mixed { r_min, h_max, r_max, ratio } => {
                if !(r_min > 0.0) || !(h_max > 0.0) || !(r_max > r_min) || !(ratio > 1.0) {
                    return Err(invalid("grid", "mixed grid needs 0 < r_min < r_max, h_max > 0, ratio > 1"));
                }
                let mut v = vec![r_min];
                let mut r = r_min;
                while r * (ratio - 1.0) < h_max && r * ratio < r_max {
                    r *= ratio;
                    v.push(r);
                }
                let steps = ((r_max - r) / h_max).ceil().max(1.0) as usize;
                let h = (r_max - r) / steps as f64;
                for k in 1..=steps {
                    v.push(r + h * k as f64);
                }
                *v.last_mut().expect("nonempty") = r_max;
                Ok(v)
            }
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Linear { count, r_max } => write!(f, "lin:{count}:{r_max}"),
            GridSpec::Geometric { count, r_min, r_max } => write!(f, "geo:{count}:{r_min}:{r_max}"),
            GridSpec::Mixed { r_min, h_max, r_max, ratio } => write!(f, "mixed:{r_min}:{h_max}:{r_max}:{ratio}"),
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `lin:COUNT:RMAX`, `geo:COUNT:RMIN:RMAX` or
    /// `mixed:RMIN:HMAX:RMAX[:RATIO]`. `pi` is accepted for any radius.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| -> Result<f64> {
            if p.eq_ignore_ascii_case("pi") {
                return Ok(PI);
            }
            p.parse::<f64>().map_err(|_| invalid("grid", format!("cannot parse number `{p}` in `{s}`")))
        };
        let count = |p: &str| -> Result<usize> {
            p.parse::<usize>().map_err(|_| invalid("grid", format!("cannot parse count `{p}` in `{s}`")))
        };
        let spec = match parts.as_slice() {
            ["lin", c, r] => GridSpec::Linear { count: count(c)?, r_max: num(r)? },
            ["geo", c, a, b] => GridSpec::Geometric { count: count(c)?, r_min: num(a)?, r_max: num(b)? },
            ["mixed", a, h, b] => GridSpec::Mixed { r_min: num(a)?, h_max: num(h)?, r_max: num(b)?, ratio: DEFAULT_MIXED_RATIO },
            ["mixed", a, h, b, q] => GridSpec::Mixed { r_min: num(a)?, h_max: num(h)?, r_max: num(b)?, ratio: num(q)? },
            _ => return Err(invalid("grid", format!("unrecognized grid spec `{s}`"))),
        };
        spec.nodes()?;
        Ok(spec)
    }
}

/// Radial levels `0 = ρ_0 < ρ_1 < … < ρ_m` with finite-volume cells: the
/// vertex owns `[0, ρ_1/2]`, interior levels own the span between the
/// midpoints to their neighbours, and the last level owns `[mid, ρ_m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    /// Radii including the vertex `0`.
    pub levels: Vec<f64>,
}

impl RadialGrid {
    /// Builds from strictly increasing positive nodes (vertex added).
    pub fn from_nodes(nodes: &[f64]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("grid", "needs at least one positive node"));
        }
        let mut levels = Vec::with_capacity(nodes.len() + 1);
        levels.push(0.0);
        for &r in nodes {
            if !(r > *levels.last().expect("nonempty")) || !r.is_finite() {
                return Err(invalid("grid", "nodes must be finite, positive and strictly increasing"));
            }
            levels.push(r);
        }
        Ok(Self { levels })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        Self::from_nodes(&spec.nodes()?)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn r_max(&self) -> f64 {
        *self.levels.last().expect("nonempty")
    }

    /// Cell `[lo, hi]` of level `k`.
    pub fn cell(&self, k: usize) -> (f64, f64) {
        let m = self.levels.len() - 1;
        let lo = if k == 0 { 0.0 } else { 0.5 * (self.levels[k - 1] + self.levels[k]) };
        let hi = if k == m { self.levels[m] } else { 0.5 * (self.levels[k] + self.levels[k + 1]) };
        (lo, hi)
    }

    /// `∫_cell w` for every level.
    pub fn cell_integrals(&self, w: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        (0..self.levels.len())
            .map(|k| {
                let (a, b) = self.cell(k);
                quad(&w, a, b)
            })
            .collect()
    }

    /// Index of the level whose cell contains `r` (clamped to the grid).
    pub fn locate(&self, r: f64) -> usize {
        let m = self.levels.len() - 1;
        // first interface at or above r
        let mut lo = 0;
        let mut hi = m;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.cell(mid).1 < r {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

// ---------------------------------------------------------------------------
// Cones

/// The `(K, N)`-cone over a finite base: radial levels × base points with
/// the vertex (and, for `K > 0` with a grid reaching `π/√K`, the far pole)
/// collapsed to single points. Distances are evaluated on demand.
#[derive(Debug, Clone)]
pub struct ConeSpace {
    base: FiniteMMSpace,
    k: f64,
    n: f64,
    grid: RadialGrid,
    spec: Option<GridSpec>,
    /// First point index of every level.
    level_start: Vec<usize>,
    collapsed: Vec<bool>,
    /// Unnormalized `∫_cell 𝔰_K^N`.
    radial_weight: Vec<f64>,
    base_prob: Vec<f64>,
    // per point
    radius: Vec<f64>,
    level_of: Vec<usize>,
    base_of: Vec<usize>,
    sin_scaled: Vec<f64>,
    mass: Vec<f64>,
    /// `hav(d_X ∧ π)` over base pairs.
    base_hav: Vec<f64>,
    /// `cos²((d_X ∧ π)/2)` over base pairs.
    base_cohav: Vec<f64>,
}

/// Absolute tolerance for "the grid ends at the far pole".
const POLE_TOL: f64 = 1e-9;

impl ConeSpace {
    pub fn base(&self) -> &FiniteMMSpace {
        &self.base
    }
    pub fn curvature(&self) -> f64 {
        self.k
    }
    pub fn dimension(&self) -> f64 {
        self.n
    }
    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }
    pub fn grid_spec(&self) -> Option<&GridSpec> {
        self.spec.as_ref()
    }
    pub fn vertex(&self) -> usize {
        0
    }
    /// Index of the collapsed far pole, if the grid reaches it.
    pub fn far_pole(&self) -> Option<usize> {
        let m = self.grid.len() - 1;
        (m > 0 && self.collapsed[m]).then(|| self.level_start[m])
    }
    pub fn levels(&self) -> usize {
        self.grid.len()
    }
    pub fn is_collapsed(&self, level: usize) -> bool {
        self.collapsed[level]
    }
    pub fn radius(&self, i: usize) -> f64 {
        self.radius[i]
    }
    pub fn level_of(&self, i: usize) -> usize {
        self.level_of[i]
    }
    /// Base coordinate of a point; collapsed points report 0.
    pub fn base_of(&self, i: usize) -> usize {
        self.base_of[i]
    }
    /// Normalized base measure.
    pub fn base_probability(&self) -> &[f64] {
        &self.base_prob
    }
    /// Unnormalized radial cell weights `∫_cell 𝔰_K^N`.
    pub fn radial_weights(&self) -> &[f64] {
        &self.radial_weight
    }

    /// Index of `(level, x)`; collapsed levels ignore `x`.
    pub fn index(&self, level: usize, x: usize) -> usize {
        if self.collapsed[level] {
            self.level_start[level]
        } else {
            self.level_start[level] + x
        }
    }

    /// Points of a level, in base order.
    pub fn level_points(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.level_start[level];
        let len = if self.collapsed[level] { 1 } else { self.base.len() };
        start..start + len
    }

    /// Level whose radius is closest to `r`.
    pub fn nearest_level(&self, r: f64) -> usize {
        (0..self.grid.len())
            .min_by(|&a, &b| (self.grid.levels[a] - r).abs().total_cmp(&(self.grid.levels[b] - r).abs()))
            .expect("nonempty grid")
    }

    /// Radial marginal of a measure on the cone, indexed by level.
    pub fn radial_marginal(&self, mu: &ProbMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (i, w) in mu.weights().iter().enumerate() {
            out[self.level_of[i]] += w;
        }
        out
    }

    /// Base marginal over non-collapsed levels; collapsed mass is spread by
    /// the base measure.
    pub fn base_marginal(&self, mu: &ProbMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.base.len()];
        for (i, w) in mu.weights().iter().enumerate() {
            if self.collapsed[self.level_of[i]] {
                for (o, p) in out.iter_mut().zip(&self.base_prob) {
                    *o += w * p;
                }
            } else {
                out[self.base_of[i]] += w;
            }
        }
        out
    }

    /// The product of a radial law (weights per level) with the normalized
    /// base measure.
    pub fn product_measure(&self, radial: &[f64]) -> Result<ProbMeasure> {
        if radial.len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                got: radial.len(),
            });
        }
        let mut w = vec![0.0; self.len()];
        for (level, &p) in radial.iter().enumerate() {
            if self.collapsed[level] {
                w[self.level_start[level]] = p;
            } else {
                for (x, q) in self.base_prob.iter().enumerate() {
                    w[self.level_start[level] + x] = p * q;
                }
            }
        }
        ProbMeasure::normalized(w)
    }

    /// Tabulates the cone as a dense space.
    pub fn to_finite(&self) -> Result<FiniteMMSpace> {
        let spec = self.spec.as_ref().map(|s| s.to_string());
        Ok(FiniteMMSpace::from_metric(self)?
            .with_name(format!("cone-K{}-N{}-{}", self.k, self.n, self.base.name()))
            .with_meta(
                "build_cone",
                serde_json::json!({ "K": self.k, "N": self.n, "grid": spec, "base": self.base.name() }),
            ))
    }

    /// Mmspace file plus a `cone` block carrying `K`, `N`, the grid and the
    /// base space.
    pub fn to_file(&self) -> Result<SpaceFile> {
        let mut file = self.to_finite()?.to_file();
        file.cone = Some(serde_json::to_value(ConeBlock {
            k: self.k,
            n: self.n,
            grid: self.grid.levels[1..].to_vec(),
            grid_spec: self.spec.as_ref().map(|s| s.to_string()),
            base: self.base.to_file(),
        })?);
        Ok(file)
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_file()?.save(path)
    }

    /// Rebuilds a cone from a file written by [`ConeSpace::save_json`].
    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = SpaceFile::load(path)?;
        let block: ConeBlock = match file.cone {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(Error::InvalidSpace("file has no cone block".into())),
        };
        let base = block.base.into_space()?;
        let grid = RadialGrid::from_nodes(&block.grid)?;
        let mut cone = build_cone_on(base, block.k, block.n, grid)?;
        cone.spec = block.grid_spec.and_then(|s| s.parse().ok());
        Ok(cone)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConeBlock {
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "N")]
    n: f64,
    grid: Vec<f64>,
    #[serde(default)]
    grid_spec: Option<String>,
    base: SpaceFile,
}

impl MetricMeasure for ConeSpace {
    fn len(&self) -> usize {
        self.radius.len()
    }

    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let nb = self.base.len();
        let h = self.base_hav[self.base_of[i] * nb + self.base_of[j]];
        let (r, s) = (self.radius[i], self.radius[j]);
        if self.k == 0.0 {
            let d2 = (r - s) * (r - s) + 4.0 * r * s * h;
            d2.max(0.0).sqrt()
        } else {
            // hav(D) and 1 − hav(D) are both sums of nonnegative terms, so
            // atan2 stays accurate near D = 0 and near the antipode
            let sk = self.k.sqrt();
            let ss = self.sin_scaled[i] * self.sin_scaled[j];
            let x = hav(sk * (r - s)) + ss * h;
            let c = (0.5 * sk * (r + s)).cos();
            let y = c * c + ss * self.base_cohav[self.base_of[i] * nb + self.base_of[j]];
            2.0 * x.max(0.0).sqrt().atan2(y.max(0.0).sqrt()) / sk
        }
    }

    fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn diameter(&self) -> f64 {
        let base_diam = self.base.diameter().min(PI);
        let r = self.grid.r_max();
        if self.k == 0.0 {
            // two outermost points at base distance d: 2r sin(d/2)
            2.0 * r * (0.5 * base_diam).sin()
        } else {
            let n = self.len();
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| self.dist(i, j))
                .fold(0.0, f64::max)
        }
    }
}

/// Builds the `(K, N)`-cone over `base` on the radial grid `spec`.
///
/// Base distances beyond `π` are clamped with a warning. For `K > 0` the
/// grid must stay inside `[0, π/√K]`; a last node at `π/√K` becomes the
/// collapsed far pole.
pub fn build_cone(base: &FiniteMMSpace, k: f64, n: f64, spec: &GridSpec) -> Result<ConeSpace> {
    let grid = RadialGrid::from_spec(spec)?;
    let mut cone = build_cone_on(base.clone(), k, n, grid)?;
    cone.spec = Some(spec.clone());
    Ok(cone)
}

/// [`build_cone`] on explicit radial levels.
pub fn build_cone_on(base: FiniteMMSpace, k: f64, n: f64, grid: RadialGrid) -> Result<ConeSpace> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(invalid("K", "cone curvature must be finite and ≥ 0"));
    }
    if !(n >= 1.0) {
        return Err(invalid("N", "must be at least 1"));
    }
    if base.is_empty() {
        return Err(Error::InvalidSpace("empty base".into()));
    }
    let m = grid.len() - 1;
    let mut collapsed = vec![false; m + 1];
    collapsed[0] = true;
    if k > 0.0 {
        let pole = PI / k.sqrt();
        if grid.r_max() > pole + POLE_TOL {
            return Err(invalid("grid", format!("r_max {} exceeds π/√K = {pole}", grid.r_max())));
        }
        if (grid.r_max() - pole).abs() <= POLE_TOL {
            collapsed[m] = true;
        }
    }
    let base_diam = base.diameter();
    if base_diam > PI + 1e-9 {
        log::warn!("base diameter {base_diam} exceeds π; cone distance clamps base distances at π");
    }
    let base_hav: Vec<f64> = base.dist_table().iter().map(|&d| hav(d.min(PI))).collect();
    let base_cohav: Vec<f64> = base.dist_table().iter().map(|&d| (0.5 * d.min(PI)).cos().powi(2)).collect();
    let base_prob: Vec<f64> = {
        let t = base.total_mass();
        base.mass().iter().map(|m| m / t).collect()
    };
    let radial_weight = grid.cell_integrals(|r| s_kappa(k, r).max(0.0).powf(n))?;

    let mut level_start = Vec::with_capacity(m + 1);
    let (mut radius, mut level_of, mut base_of, mut mass) = (vec![], vec![], vec![], vec![]);
    for level in 0..=m {
        level_start.push(radius.len());
        let r = if collapsed[level] && level == m && k > 0.0 { PI / k.sqrt() } else { grid.levels[level] };
        if collapsed[level] {
            radius.push(r);
            level_of.push(level);
            base_of.push(0);
            mass.push(radial_weight[level]);
        } else {
            for (x, p) in base_prob.iter().enumerate() {
                radius.push(r);
                level_of.push(level);
                base_of.push(x);
                mass.push(radial_weight[level] * p);
            }
        }
    }
    let total = pairwise_sum(&mass);
    if !(total > 0.0) {
        return Err(Error::InvalidSpace("cone has zero total mass".into()));
    }
    mass.iter_mut().for_each(|w| *w /= total);
    let sk = k.sqrt();
    let sin_scaled = radius.iter().map(|&r| if k > 0.0 { (sk * r).sin() } else { 0.0 }).collect();
    Ok(ConeSpace {
        base,
        k,
        n,
        grid,
        spec: None,
        level_start,
        collapsed,
        radial_weight,
        base_prob,
        radius,
        level_of,
        base_of,
        sin_scaled,
        mass,
        base_hav,
        base_cohav,
    })
}

/// Spherical suspension: the `(1, N)`-cone on `[0, π]`.
pub fn suspension(base: &FiniteMMSpace, n: f64, spec: &GridSpec) -> Result<ConeSpace> {
    build_cone(base, 1.0, n, spec)
}

/// Result of pushing a measure forward under a homothety.
#[derive(Debug, Clone)]
pub struct Pushforward {
    pub measure: ProbMeasure,
    /// Mass whose image left the grid and was parked on the outermost cell.
    pub boundary_mass: f64,
}

/// Pushforward of `mu` under `(s, y) ↦ (λs, y)` on a flat cone.
///
/// Each cell's mass is spread over the target cells its image overlaps, in
/// proportion to the overlapped cone measure, which is exact for measures
/// with cellwise constant density.
pub fn homothety_pushforward(cone: &ConeSpace, mu: &ProbMeasure, lambda: f64) -> Result<Pushforward> {
    if cone.k != 0.0 {
        return Err(Error::CurvedCone(cone.k));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(invalid("lambda", "must be positive"));
    }
    if mu.len() != cone.len() {
        return Err(Error::DimensionMismatch { expected: cone.len(), got: mu.len() });
    }
    let n = cone.n;
    let grid = &cone.grid;
    let levels = grid.len();
    let r_max = grid.r_max();
    let prim = |r: f64| r.powf(n + 1.0) / (n + 1.0);
    let mut out = vec![0.0; cone.len()];
    let mut boundary = 0.0;
    let w = mu.weights();
    for level in 0..levels {
        let (lo, hi) = grid.cell(level);
        let (ilo, ihi) = (lambda * lo, lambda * hi);
        let total = prim(ihi) - prim(ilo);
        let mut shares: Vec<(usize, f64)> = Vec::new();
        let first = grid.locate(ilo);
        for target in first..levels {
            let (tlo, thi) = grid.cell(target);
            if tlo >= ihi {
                break;
            }
            let (a, b) = (tlo.max(ilo), thi.min(ihi));
            if b > a {
                shares.push((target, (prim(b) - prim(a)) / total));
            }
        }
        let outside = if ihi > r_max { (prim(ihi) - prim(ilo.max(r_max))) / total } else { 0.0 };
        for i in cone.level_points(level) {
            let mass = w[i];
            if mass == 0.0 {
                continue;
            }
            let deposit = |out: &mut [f64], target: usize, amount: f64| {
                if cone.collapsed[target] {
                    out[cone.level_start[target]] += amount;
                } else if cone.collapsed[level] {
                    for (x, p) in cone.base_prob.iter().enumerate() {
                        out[cone.level_start[target] + x] += amount * p;
                    }
                } else {
                    out[cone.level_start[target] + cone.base_of[i]] += amount;
                }
            };
            for &(target, frac) in &shares {
                deposit(&mut out, target, mass * frac);
            }
            if outside > 0.0 {
                boundary += mass * outside;
                deposit(&mut out, levels - 1, mass * outside);
            }
        }
    }
    Ok(Pushforward {
        measure: ProbMeasure::normalized(out)?,
        boundary_mass: boundary,
    })
}

// ---------------------------------------------------------------------------
// Bishop–Gromov

/// Ball-volume profile of a space around one point against the `(K, N)`
/// model profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonProfile {
    pub center: usize,
    pub k: f64,
    pub n: f64,
    pub r: Vec<f64>,
    /// Normalized mass of closed balls.
    pub v: Vec<f64>,
    /// Shell density from symmetric difference quotients of `v`
    /// (diagnostic only).
    pub s: Vec<f64>,
    /// Model volumes `∫_0^r 𝔰_{K/(N−1)}^{N−1}`.
    pub model_v: Vec<f64>,
    /// Model sphere areas `𝔰_{K/(N−1)}(r)^{N−1}`.
    pub model_s: Vec<f64>,
    /// `v(r)/v(R) − model_v(r)/model_v(R)` with `R` the largest radius.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub max_abs_margin: f64,
    /// Radii whose ball holds no mass besides the centre.
    pub empty_balls: Vec<f64>,
}

/// Compares ball volumes around `x0` with the `(K, N)` model. `N = 1` uses
/// the flat profile `r`.
pub fn bishop_gromov_check<S: MetricMeasure + ?Sized>(
    space: &S,
    x0: usize,
    k: f64,
    n: f64,
    r_grid: &[f64],
) -> Result<ComparisonProfile> {
    if x0 >= space.len() {
        return Err(invalid("x0", "point index out of range"));
    }
    if r_grid.is_empty() || r_grid.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("r_grid", "radii must be positive"));
    }
    if !(n >= 1.0) {
        return Err(invalid("N", "must be at least 1"));
    }
    let kappa = if n > 1.0 { k / (n - 1.0) } else { 0.0 };
    if k > 0.0 && n > 1.0 {
        let lim = PI * ((n - 1.0) / k).sqrt();
        if r_grid.iter().any(|&r| r > lim + 1e-12) {
            return Err(invalid("r_grid", format!("radii must stay within π√((N−1)/K) = {lim}")));
        }
    }
    let mut r: Vec<f64> = r_grid.to_vec();
    r.sort_by(f64::total_cmp);
    let total = space.total_mass();
    let mass = space.mass();
    let mut row = vec![0.0; space.len()];
    space.dist_row(x0, &mut row);
    let v: Vec<f64> = r
        .iter()
        .map(|&rad| {
            let inside: Vec<f64> = row.iter().zip(mass).filter(|(d, _)| **d <= rad).map(|(_, m)| *m).collect();
            pairwise_sum(&inside) / total
        })
        .collect();
    let empty_balls = r
        .iter()
        .filter(|&&rad| row.iter().enumerate().all(|(j, d)| j == x0 || *d > rad))
        .copied()
        .collect();
    let density = |t: f64| if n == 1.0 { 1.0 } else { s_kappa(kappa, t).max(0.0).powf(n - 1.0) };
    let model_v = r.iter().map(|&rad| quad(density, 0.0, rad)).collect::<Result<Vec<_>>>()?;
    let model_s: Vec<f64> = r.iter().map(|&rad| density(rad)).collect();
    let last = r.len() - 1;
    let margins: Vec<f64> = (0..r.len()).map(|i| v[i] / v[last] - model_v[i] / model_v[last]).collect();
    let s = (0..r.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(last));
            if a == b {
                0.0
            } else {
                (v[b] - v[a]) / (r[b] - r[a])
            }
        })
        .collect();
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs_margin = margins.iter().map(|m| m.abs()).fold(0.0, f64::max);
    Ok(ComparisonProfile {
        center: x0,
        k,
        n,
        r,
        v,
        s,
        model_v,
        model_s,
        margins,
        min_margin,
        max_abs_margin,
        empty_balls,
    })
}

/// Convenience: metadata describing a cone for reports.
pub fn cone_meta(cone: &ConeSpace) -> SpaceMeta {
    SpaceMeta {
        generator: "build_cone".into(),
        params: serde_json::json!({
            "K": cone.k,
            "N": cone.n,
            "grid": cone.spec.as_ref().map(|s| s.to_string()),
            "levels": cone.grid.len(),
            "base": cone.base.name(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmspace::{circle, interval_model, max_triangle_excess, sphere_fibonacci, validate_space};

    #[test]
    fn comparison_functions() {
        assert_eq!(s_kappa(0.0, 0.7), 0.7);
        assert_eq!(c_kappa(0.0, 0.7), 1.0);
        assert!((s_kappa(1.0, PI / 2.0) - 1.0).abs() < 1e-15);
        // sinh(1) from a 30-digit reference
        assert!((s_kappa(-1.0, 1.0) - 1.175_201_193_643_801_4).abs() < 1e-14);
        assert!((c_kappa(-1.0, 1.0) - 1.543_080_634_815_243_7).abs() < 1e-14);
    }

    #[test]
    fn comparison_continuity_at_zero() {
        for &th in &[0.1, 1.0, 2.5] {
            assert!((s_kappa(1e-12, th) - th).abs() < 1e-9);
            assert!((s_kappa(-1e-12, th) - th).abs() < 1e-9);
            assert!((c_kappa(1e-12, th) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn c_kappa_is_derivative() {
        for &k in &[-2.0, 0.0, 0.5, 3.0] {
            let th = 0.6;
            let h = 1e-6;
            let fd = (s_kappa(k, th + h) - s_kappa(k, th - h)) / (2.0 * h);
            assert!((fd - c_kappa(k, th)).abs() < 1e-8);
        }
    }

    #[test]
    fn distortion_coefficients() {
        assert_eq!(sigma(0.3, 0.0, 2.0), 0.3);
        assert!((sigma(0.5, 1.0, PI / 2.0) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(sigma(0.3, 4.0, PI).is_infinite());
        assert!(sigma(0.3, 1.0, PI).is_infinite());
        let s = sigma(0.5, -1.0, 1.0);
        assert!((s - (0.5f64).sinh() / 1f64.sinh()).abs() < 1e-15);
    }

    #[test]
    fn tau_coefficients() {
        assert!((tau(0.4, 0.0, 3.0, 1.0).unwrap() - 0.4).abs() < 1e-15);
        assert!((tau(1.0, 1.0, 2.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        // sqrt(1/2) * sqrt(sin(π/4))
        let v = tau(0.5, 1.0, 2.0, PI / 2.0).unwrap();
        assert!((v - 0.594_603_557_501_360_5).abs() < 1e-12, "{v}");
        assert!(tau(0.5, 1.0, 1.0, 1.0).is_err());
        assert!(tau(0.5, 4.0, 2.0, 2.0).unwrap().is_infinite());
    }

    #[test]
    fn grid_specs_parse_and_round_trip() {
        for s in ["lin:10:3.0", "geo:64:0.01:4", "mixed:0.001:0.06:2.6:1.2", "lin:8:pi"] {
            let g: GridSpec = s.parse().unwrap();
            let again: GridSpec = g.to_string().parse().unwrap();
            assert_eq!(g, again);
        }
        let g: GridSpec = "geo:64:0.01:4.0".parse().unwrap();
        let nodes = g.nodes().unwrap();
        assert_eq!(nodes.len(), 64);
        assert!((nodes[0] - 0.01).abs() < 1e-15 && nodes[63] == 4.0);
        assert!("geo:1:0.1:1".parse::<GridSpec>().is_err());
        assert!("foo:1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn mixed_grid_spacing() {
        let g = GridSpec::Mixed { r_min: 0.001, h_max: 0.06, r_max: 2.6, ratio: 1.2 };
        let v = g.nodes().unwrap();
        assert_eq!(*v.last().unwrap(), 2.6);
        for w in v.windows(2) {
            assert!(w[1] > w[0]);
            assert!(w[1] - w[0] <= 0.06 + 1e-12);
        }
    }

    #[test]
    fn radial_cells_tile_the_range() {
        let grid = RadialGrid::from_spec(&"geo:20:0.05:3".parse().unwrap()).unwrap();
        let mut prev = 0.0;
        for k in 0..grid.len() {
            let (a, b) = grid.cell(k);
            assert_eq!(a, prev);
            assert!(b > a);
            prev = b;
            assert_eq!(grid.locate(0.5 * (a + b)), k);
        }
        assert_eq!(prev, 3.0);
    }

    #[test]
    fn flat_cone_orthogonal_rays() {
        let base = circle(2.0 * PI, 4).unwrap();
        let cone = build_cone(&base, 0.0, 1.0, &"lin:4:2".parse().unwrap()).unwrap();
        let level = cone.nearest_level(1.0);
        let (p, q) = (cone.index(level, 0), cone.index(level, 1));
        assert!((cone.dist(p, q) - 2f64.sqrt()).abs() < 1e-14);
        assert!((cone.dist(cone.vertex(), p) - 1.0).abs() < 1e-15);
        let far = cone.index(cone.nearest_level(2.0), 0);
        assert!((cone.dist(p, far) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_cone_over_circle_is_the_plane() {
        let n = 24;
        let base = circle(2.0 * PI, n).unwrap();
        let cone = build_cone(&base, 0.0, 1.0, &"geo:12:0.05:2".parse().unwrap()).unwrap();
        let planar = |i: usize| {
            let r = cone.radius(i);
            let phi = 2.0 * PI * cone.base_of(i) as f64 / n as f64;
            (r * phi.cos(), r * phi.sin())
        };
        for i in 0..cone.len() {
            for j in 0..cone.len() {
                let (a, b) = (planar(i), planar(j));
                let e = (a.0 - b.0).hypot(a.1 - b.1);
                assert!((cone.dist(i, j) - e).abs() < 1e-12, "{i} {j}");
            }
        }
    }

    #[test]
    fn suspension_equator_is_isometric() {
        let base = sphere_fibonacci(2, 1.0, 40).unwrap();
        let cone = suspension(&base, 2.0, &"lin:8:pi".parse().unwrap()).unwrap();
        let eq = cone.nearest_level(PI / 2.0);
        assert!((cone.grid().levels[eq] - PI / 2.0).abs() < 1e-15);
        for x in 0..base.len() {
            for y in 0..base.len() {
                let d = cone.dist(cone.index(eq, x), cone.index(eq, y));
                assert!((d - base.dist(x, y)).abs() < 1e-14);
            }
        }
        let pole = cone.far_pole().expect("pole");
        assert!((cone.dist(cone.vertex(), pole) - PI).abs() < 1e-15);
    }

    #[test]
    fn suspension_of_circle_is_round_sphere() {
        let n = 16;
        let base = circle(2.0 * PI, n).unwrap();
        let cone = suspension(&base, 1.0, &"lin:10:pi".parse().unwrap()).unwrap();
        let unit = |i: usize| {
            let theta = cone.radius(i);
            let phi = 2.0 * PI * cone.base_of(i) as f64 / n as f64;
            [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
        };
        for i in 0..cone.len() {
            for j in 0..cone.len() {
                let g = crate::mmspace::great_circle_angle(&unit(i), &unit(j));
                assert!((cone.dist(i, j) - g).abs() < 1e-12, "{i} {j} {} {g}", cone.dist(i, j));
            }
        }
    }

    #[test]
    fn cone_mass_product_rule() {
        let base = interval_model(2.0, 5).unwrap();
        let cone = build_cone(&base, 0.0, 2.0, &"geo:6:0.1:2".parse().unwrap()).unwrap();
        let w = cone.radial_weights();
        let total: f64 = w.iter().sum();
        for i in 0..cone.len() {
            let level = cone.level_of(i);
            let expect = if cone.is_collapsed(level) {
                w[level] / total
            } else {
                w[level] * cone.base_probability()[cone.base_of(i)] / total
            };
            assert!((cone.mass()[i] - expect).abs() < 1e-15);
        }
        // ∫_0^{r} s^2 ds over the whole grid
        assert!((total - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cone_rejects_bad_input() {
        let base = circle(2.0 * PI, 8).unwrap();
        assert!(build_cone(&base, 1.0, 2.0, &"lin:4:4".parse().unwrap()).is_err());
        assert!(build_cone(&base, -1.0, 2.0, &"lin:4:1".parse().unwrap()).is_err());
        assert!(build_cone(&base, 0.0, 0.5, &"lin:4:1".parse().unwrap()).is_err());
    }

    #[test]
    fn cone_is_a_valid_space() {
        let base = circle(4.0 * PI / 3.0, 10).unwrap();
        let cone = build_cone(&base, 0.0, 1.0, &"geo:10:0.05:2".parse().unwrap()).unwrap();
        assert!(validate_space(&cone, true).is_valid());
        let sus = suspension(&sphere_fibonacci(2, 1.0, 20).unwrap(), 2.0, &"lin:9:pi".parse().unwrap()).unwrap();
        assert!(validate_space(&sus, true).is_valid());
    }

    #[test]
    fn cone_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cone.json");
        let base = circle(2.0 * PI, 6).unwrap();
        let cone = build_cone(&base, 0.0, 1.5, &"geo:5:0.1:2".parse().unwrap()).unwrap();
        cone.save_json(&p).unwrap();
        let back = ConeSpace::load_json(&p).unwrap();
        assert_eq!(back.len(), cone.len());
        assert_eq!(back.mass(), cone.mass());
        assert_eq!(back.grid_spec(), cone.grid_spec());
        assert!(FiniteMMSpace::load_json(&p).is_ok());
    }

    #[test]
    fn homothety_identity_and_point_mass() {
        let base = circle(2.0 * PI, 6).unwrap();
        let cone = build_cone(&base, 0.0, 1.0, &"lin:8:4".parse().unwrap()).unwrap();
        let mu = ProbMeasure::from_space(&cone);
        let same = homothety_pushforward(&cone, &mu, 1.0).unwrap();
        for (a, b) in same.measure.weights().iter().zip(mu.weights()) {
            assert!((a - b).abs() < 1e-14);
        }
        let p = cone.index(cone.nearest_level(1.0), 2);
        let pushed = homothety_pushforward(&cone, &ProbMeasure::dirac(cone.len(), p), 2.0).unwrap();
        let target = cone.index(cone.nearest_level(2.0), 2);
        // the image cell [1.5, 2.5] contains the target cell [1.75, 2.25]
        assert!(pushed.measure.weights()[target] > 0.4);
        let base_marg = cone.base_marginal(&pushed.measure);
        assert!((base_marg[2] - 1.0).abs() < 1e-14);
        assert!(homothety_pushforward(&build_cone(&base, 1.0, 1.0, &"lin:8:pi".parse().unwrap()).unwrap(), &ProbMeasure::uniform(50), 2.0).is_err());
    }

    #[test]
    fn bishop_gromov_interval_model_is_sharp() {
        for &n in &[2.0, 3.0] {
            let s = interval_model(n, 400).unwrap();
            let r: Vec<f64> = (1..=20).map(|k| 3.0 * k as f64 / 20.0).collect();
            let p = bishop_gromov_check(&s, 0, n - 1.0, n, &r).unwrap();
            assert!(p.min_margin >= -1e-2, "{p:?}");
            assert!(p.max_abs_margin <= 1e-2);
            assert!(p.margins.last().unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn bishop_gromov_rejects_out_of_range() {
        let s = interval_model(2.0, 40).unwrap();
        assert!(bishop_gromov_check(&s, 0, 1.0, 2.0, &[4.0]).is_err());
        let p = bishop_gromov_check(&s, 0, 1.0, 2.0, &[1e-4, 1.0]).unwrap();
        assert_eq!(p.empty_balls, vec![1e-4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn sigma_tends_to_t(t in 0.0f64..1.0, theta in 0.0f64..3.0, eps in -1e-9f64..1e-9) {
                prop_assert!((sigma(t, eps, theta) - t).abs() < 1e-8);
            }

            #[test]
            fn cone_triangle_inequality(k in prop_oneof![Just(0.0), 0.25f64..4.0], n in 1.0f64..4.0, nb in 3usize..12, c in 1.0f64..6.0) {
                let base = circle(c, nb).unwrap();
                let spec = if k == 0.0 {
                    GridSpec::Geometric { count: 8, r_min: 0.05, r_max: 3.0 }
                } else {
                    GridSpec::Linear { count: 8, r_max: PI / k.sqrt() }
                };
                let cone = build_cone(&base, k, n, &spec).unwrap();
                prop_assert!(max_triangle_excess(&cone, 20_000, 5) <= 1e-9);
                let total: f64 = cone.mass().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
