//! Mean-distance functionals `M_f`, their model values on round spheres,
//! the cos-potential, relative entropy and rigidity diagnostics.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mmspace::{histogram_on, MetricMeasure, ProbMeasure};
use crate::numeric::pairwise_sum;
use crate::quadrature::{integrate, QuadSettings};

/// Slack on distances above `π` before they count as out of domain.
pub const DIAMETER_TOL: f64 = 1e-9;

/// Monotone piecewise-linear function on `[0, π]` given by knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotTable {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub increasing: bool,
}

impl KnotTable {
    /// Largest jump tolerated at repeated knots.
    pub const JUMP_TOL: f64 = 1e-9;

    pub fn new(x: Vec<f64>, y: Vec<f64>, increasing: bool) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        if x.len() < 2 {
            return Err(invalid("f", "knot table needs at least two knots"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("f", "knot table entries must be finite"));
        }
        if x[0] > 0.0 || *x.last().expect("nonempty") < PI - 1e-12 {
            return Err(invalid("f", "knots must cover [0, π]"));
        }
        for k in 1..x.len() {
            if x[k] < x[k - 1] {
                return Err(invalid("f", "knot abscissae must be nondecreasing"));
            }
            if x[k] == x[k - 1] && (y[k] - y[k - 1]).abs() > Self::JUMP_TOL {
                return Err(invalid("f", format!("discontinuity of size {} at knot {}", (y[k] - y[k - 1]).abs(), x[k])));
            }
            let step = y[k] - y[k - 1];
            if (increasing && step < 0.0) || (!increasing && step > 0.0) {
                return Err(invalid("f", format!("knot table is not monotone at knot {k}")));
            }
        }
        Ok(Self { x, y, increasing })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = self.x.partition_point(|&v| v <= t);
        let (x0, x1, y0, y1) = (self.x[k - 1], self.x[k], self.y[k - 1], self.y[k]);
        if x1 == x0 {
            return y1;
        }
        y0 + (y1 - y0) * (t - x0) / (x1 - x0)
    }
}

/// The function `f : [0, π] → ℝ` inside `M_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFunction {
    Identity,
    Square,
    Cos,
    Custom(KnotTable),
}

impl KernelFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            KernelFunction::Identity => t,
            KernelFunction::Square => t * t,
            KernelFunction::Cos => t.cos(),
            KernelFunction::Custom(k) => k.eval(t),
        }
    }

    pub fn is_increasing(&self) -> bool {
        match self {
            KernelFunction::Identity | KernelFunction::Square => true,
            KernelFunction::Cos => false,
            KernelFunction::Custom(k) => k.increasing,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            KernelFunction::Identity => "identity",
            KernelFunction::Square => "square",
            KernelFunction::Cos => "cos",
            KernelFunction::Custom(_) => "custom",
        }
    }
}

impl fmt::Display for KernelFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for KernelFunction {
    type Err = Error;

    /// Builtins by name; custom tables are loaded by the caller.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(KernelFunction::Identity),
            "square" | "sq" => Ok(KernelFunction::Square),
            "cos" => Ok(KernelFunction::Cos),
            other => Err(invalid("f", format!("unknown function `{other}` (identity, square, cos)"))),
        }
    }
}

fn check_domain<S: MetricMeasure + ?Sized>(space: &S, clamp: bool) -> Result<()> {
    let diam = space.diameter();
    if diam > PI + DIAMETER_TOL {
        if !clamp {
            return Err(Error::DiameterExceeded { value: diam });
        }
        log::warn!("diameter {diam} exceeds π; distances are clamped to π");
    }
    Ok(())
}

/// `Σ_ij g(d_ij) m_i m_j / m(X)²` with a fixed reduction order.
fn double_mean<S: MetricMeasure + ?Sized>(space: &S, g: impl Fn(f64) -> f64 + Sync) -> f64 {
    let n = space.len();
    let mass = space.mass();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            space.dist_row(i, &mut row);
            let terms: Vec<f64> = row.iter().zip(mass).map(|(d, m)| g(*d) * m).collect();
            pairwise_sum(&terms) * mass[i]
        })
        .collect();
    let total = space.total_mass();
    pairwise_sum(&rows) / (total * total)
}

/// `M_f(X)`, normalized by `m(X)²` and including the diagonal. Fails if a
/// distance exceeds `π`.
pub fn m_f<S: MetricMeasure + ?Sized>(space: &S, f: &KernelFunction) -> Result<f64> {
    m_f_with(space, f, false)
}

/// [`m_f`], optionally clamping distances above `π`.
pub fn m_f_with<S: MetricMeasure + ?Sized>(space: &S, f: &KernelFunction, clamp: bool) -> Result<f64> {
    check_domain(space, clamp)?;
    Ok(double_mean(space, |d| f.eval(d.min(PI))))
}

/// Minimum number of panels for [`m_f_star`].
pub const MIN_QUAD_PANELS: usize = 64;

/// Model value `∫_0^π f sin^{N−1} / ∫_0^π sin^{N−1}`, integrated adaptively
/// on `quad_n` equal panels.
pub fn m_f_star(n: f64, f: &KernelFunction, quad_n: usize) -> Result<f64> {
    if !(n >= 1.0) {
        return Err(invalid("N", "must be at least 1"));
    }
    if quad_n < MIN_QUAD_PANELS {
        return Err(invalid("quad_n", format!("must be at least {MIN_QUAD_PANELS}")));
    }
    let w = |t: f64| if n == 1.0 { 1.0 } else { t.sin().max(0.0).powf(n - 1.0) };
    let settings = QuadSettings { abs_tol: 1e-17, rel_tol: 1e-14, max_intervals: 256 };
    let h = PI / quad_n as f64;
    let mut num = Vec::with_capacity(quad_n);
    let mut den = Vec::with_capacity(quad_n);
    for k in 0..quad_n {
        let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
        num.push(integrate(|t| f.eval(t) * w(t), a, b, settings)?.value);
        den.push(integrate(w, a, b, settings)?.value);
    }
    Ok(pairwise_sum(&num) / pairwise_sum(&den))
}

/// `Σ_y f(d(x, y)) m(y) / m(X)`.
pub fn point_mean<S: MetricMeasure + ?Sized>(space: &S, f: &KernelFunction, x: usize) -> f64 {
    let mut row = vec![0.0; space.len()];
    space.dist_row(x, &mut row);
    let terms: Vec<f64> = row.iter().zip(space.mass()).map(|(d, m)| f.eval(d.min(PI)) * m).collect();
    pairwise_sum(&terms) / space.total_mass()
}

/// `a = ∫ cos d(x0, ·) dm` for the normalized measure.
pub fn cos_potential<S: MetricMeasure + ?Sized>(space: &S, x0: usize) -> f64 {
    point_mean(space, &KernelFunction::Cos, x0)
}

/// `Σ μ_i log(μ_i / m_i)` against the raw reference masses; `+∞` when `μ`
/// charges a massless point.
pub fn entropy<S: MetricMeasure + ?Sized>(mu: &ProbMeasure, space: &S) -> Result<f64> {
    if mu.len() != space.len() {
        return Err(Error::DimensionMismatch { expected: space.len(), got: mu.len() });
    }
    let mut terms = Vec::with_capacity(mu.len());
    for (&p, &m) in mu.weights().iter().zip(space.mass()) {
        if p == 0.0 {
            continue;
        }
        if m == 0.0 {
            return Ok(f64::INFINITY);
        }
        terms.push(p * (p / m).ln());
    }
    Ok(pairwise_sum(&terms))
}

/// Bins used for the distance-distribution discrepancy.
pub const DEFAULT_HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidityReport {
    pub f: String,
    pub n: f64,
    pub m_f: f64,
    pub m_f_star: f64,
    /// `M*_{f,N} − M_f` for increasing `f`, `M_f − M*_{f,N}` for decreasing.
    pub gap: f64,
    pub worst_cos_potential: f64,
    pub worst_point: usize,
    /// L¹ distance between the normalized distance histogram and the model
    /// density `sin^{N−1}`; a proxy for closeness to the sphere, not a bound.
    pub histogram_discrepancy: f64,
    pub histogram_bins: usize,
}

/// Assembles the comparison of `M_f` with its model value together with the
/// cos-potential and histogram diagnostics.
pub fn rigidity_report<S: MetricMeasure + ?Sized>(space: &S, f: &KernelFunction, n: f64) -> Result<RigidityReport> {
    rigidity_report_with(space, f, n, DEFAULT_HISTOGRAM_BINS)
}

pub fn rigidity_report_with<S: MetricMeasure + ?Sized>(
    space: &S,
    f: &KernelFunction,
    n: f64,
    bins: usize,
) -> Result<RigidityReport> {
    let mf = m_f(space, f)?;
    let star = m_f_star(n, f, 256)?;
    let gap = if f.is_increasing() { star - mf } else { mf - star };
    let potentials: Vec<f64> = (0..space.len()).into_par_iter().map(|x| cos_potential(space, x)).collect();
    let (worst_point, worst) = potentials
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    Ok(RigidityReport {
        f: f.tag().into(),
        n,
        m_f: mf,
        m_f_star: star,
        gap,
        worst_cos_potential: worst,
        worst_point,
        histogram_discrepancy: histogram_discrepancy(space, n, bins)?,
        histogram_bins: bins,
    })
}

/// L¹ distance between the `m ⊗ m` distance histogram on `[0, π]` and the
/// model law `sin^{N−1}(r) dr / ∫ sin^{N−1}`.
pub fn histogram_discrepancy<S: MetricMeasure + ?Sized>(space: &S, n: f64, bins: usize) -> Result<f64> {
    let hist = histogram_on(space, bins, PI)?.normalized();
    let w = |t: f64| if n == 1.0 { 1.0 } else { t.sin().max(0.0).powf(n - 1.0) };
    let model: Vec<f64> = (0..bins)
        .map(|b| crate::quadrature::quad(w, PI * b as f64 / bins as f64, PI * (b + 1) as f64 / bins as f64))
        .collect::<Result<_>>()?;
    let total = pairwise_sum(&model);
    Ok(hist.iter().zip(&model).map(|(h, m)| (h - m / total).abs()).sum())
}
