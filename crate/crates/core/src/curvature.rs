//! Short-time curvature estimators: the rate `ϑ⁺` at which heat flow fails
//! to contract distances, contraction checks against a lower bound `K`,
//! and the vertex dichotomy on flat cones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::functionals::cos_potential;
use crate::geometry::{build_cone_on, ConeSpace};
use crate::heat::{
    bessel_first_moment_constant, build_generator_graph, default_bandwidth, BesselModel, HeatModel,
};
use crate::mmspace::{FiniteMMSpace, MetricMeasure, ProbMeasure};
use crate::numeric::{fit_line, fit_power_plus_linear, fit_through_origin, LineFit, PowerLinearFit};
use crate::transport::{cone_dual_function, kr_value, product_coupling_cost, w2, EXACT_SUPPORT_LIMIT};

/// Outcome of a short-time fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaClass {
    Finite { theta: f64 },
    /// `v(t)` grows like a negative power of `t`.
    Divergent { exponent: f64 },
    Inconclusive,
}

impl ThetaClass {
    pub fn same_kind(&self, other: &Self) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaSettings {
    /// Gate on the RMS residual of the linear fit, relative to `1 + |θ̂|`.
    pub residual_tol: f64,
    /// Accepted band for the log-log slope of `v(t)` in the divergent case.
    pub divergence_band: (f64, f64),
    /// RMS residual gate of the log-log fit in the divergent case.
    pub power_residual_tol: f64,
}

impl Default for ThetaSettings {
    fn default() -> Self {
        Self {
            residual_tol: 0.05,
            divergence_band: (-0.6, -0.4),
            power_residual_tol: 0.1,
        }
    }
}

/// Raw curve and fits for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub x: usize,
    pub y: usize,
    pub distance: f64,
    pub t_grid: Vec<f64>,
    pub w2: Vec<f64>,
    /// `v(t) = -(1/t) log(W₂ / d)`.
    pub values: Vec<f64>,
    /// `v(t) ≈ θ̂ + β t`.
    pub linear_fit: LineFit,
    /// Log-log fit of `v` when all values are positive.
    pub power_fit: Option<LineFit>,
    /// Log-log slope of `d² − W₂²` when all values are positive.
    pub defect_exponent: Option<f64>,
    pub class: ThetaClass,
}

fn check_t_grid(t_grid: &[f64], min_len: usize) -> Result<()> {
    if t_grid.len() < min_len {
        return Err(invalid("t_grid", format!("needs at least {min_len} values")));
    }
    if t_grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("t_grid", "times must be positive and strictly increasing"));
    }
    Ok(())
}

/// `W₂(P̂_t δ_x, P̂_t δ_y)` for every `t`, in parallel over `t`.
pub fn heat_distances<S: MetricMeasure + ?Sized>(
    space: &S,
    model: &HeatModel,
    x: usize,
    y: usize,
    t_grid: &[f64],
) -> Result<Vec<f64>> {
    if space.len() != model.len() {
        return Err(Error::DimensionMismatch { expected: model.len(), got: space.len() });
    }
    let mus = model.heat_measures(x, t_grid)?;
    let nus = model.heat_measures(y, t_grid)?;
    mus.par_iter().zip(nus.par_iter()).map(|(mu, nu)| w2(space, mu, nu)).collect()
}

/// Estimates `ϑ⁺(x, y)` by extrapolating `v(t)` linearly to `t = 0`.
pub fn theta_plus_estimate<S: MetricMeasure + ?Sized>(
    space: &S,
    model: &HeatModel,
    x: usize,
    y: usize,
    t_grid: &[f64],
    settings: &ThetaSettings,
) -> Result<ThetaEstimate> {
    if x == y {
        return Err(invalid("pair", "points must differ"));
    }
    check_t_grid(t_grid, 6)?;
    let d = space.dist(x, y);
    if !(d > 0.0) {
        return Err(invalid("pair", "points are at distance zero"));
    }
    let w = heat_distances(space, model, x, y, t_grid)?;
    if let Some(k) = w.iter().position(|v| !(*v > 0.0)) {
        let hint = match model.bandwidth() {
            Some(eps) => format!("W2 = {} at t = {}; bandwidth {eps} may be too small for d = {d}", w[k], t_grid[k]),
            None => format!("W2 = {} at t = {}", w[k], t_grid[k]),
        };
        return Err(Error::Underflow { x, y, detail: hint });
    }
    Ok(classify_curve(x, y, d, t_grid, w, settings))
}

fn classify_curve(x: usize, y: usize, d: f64, t_grid: &[f64], w: Vec<f64>, settings: &ThetaSettings) -> ThetaEstimate {
    let values: Vec<f64> = w.iter().zip(t_grid).map(|(wi, t)| -(wi / d).ln() / t).collect();
    let linear_fit = fit_line(t_grid, &values);
    let log_t: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let power_fit = values
        .iter()
        .all(|v| *v > 0.0)
        .then(|| fit_line(&log_t, &values.iter().map(|v| v.ln()).collect::<Vec<_>>()));
    let defects: Vec<f64> = w.iter().map(|wi| d * d - wi * wi).collect();
    let defect_exponent = defects
        .iter()
        .all(|v| *v > 0.0)
        .then(|| fit_line(&log_t, &defects.iter().map(|v| v.ln()).collect::<Vec<_>>()).slope);
    let (lo, hi) = settings.divergence_band;
    let class = match power_fit {
        Some(p) if p.slope >= lo && p.slope <= hi && p.rms_residual <= settings.power_residual_tol => {
            ThetaClass::Divergent { exponent: p.slope }
        }
        _ if linear_fit.rms_residual <= settings.residual_tol * (1.0 + linear_fit.intercept.abs()) => {
            ThetaClass::Finite { theta: linear_fit.intercept }
        }
        _ => ThetaClass::Inconclusive,
    };
    ThetaEstimate {
        x,
        y,
        distance: d,
        t_grid: t_grid.to_vec(),
        w2: w,
        values,
        linear_fit,
        power_fit,
        defect_exponent,
        class,
    }
}

/// An estimate together with its half-resolution rerun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub primary: ThetaEstimate,
    pub half: Option<ThetaEstimate>,
    pub bandwidth: f64,
    pub half_bandwidth: Option<f64>,
    /// Primary class, downgraded to inconclusive when the rerun disagrees.
    pub class: ThetaClass,
}

/// Builds the graph model, estimates `ϑ⁺(x, y)`, and repeats at half the
/// sampling resolution (see [`FiniteMMSpace::coarse_rerun_space`]). An explicit bandwidth is rescaled by the
/// change in the default bandwidth.
pub fn theta_plus_with_rerun(
    space: &FiniteMMSpace,
    eps: Option<f64>,
    x: usize,
    y: usize,
    t_grid: &[f64],
    settings: &ThetaSettings,
) -> Result<ThetaReport> {
    let model = build_generator_graph(space, eps)?;
    let bandwidth = model.bandwidth().expect("graph model");
    let primary = theta_plus_estimate(space, &model, x, y, t_grid, settings)?;
    let (coarse, map) = space.coarse_rerun_space(&[x, y])?;
    let half = if map[0] == map[1] {
        log::warn!("pair ({x}, {y}) merges at half resolution; rerun skipped");
        None
    } else {
        let half_eps = eps.map(|e| e * default_bandwidth(&coarse) / default_bandwidth(space));
        let half_model = build_generator_graph(&coarse, half_eps)?;
        Some((theta_plus_estimate(&coarse, &half_model, map[0], map[1], t_grid, settings)?, half_model.bandwidth()))
    };
    let class = match &half {
        Some((h, _)) if !h.class.same_kind(&primary.class) => ThetaClass::Inconclusive,
        None => ThetaClass::Inconclusive,
        _ => primary.class,
    };
    let (half, half_bandwidth) = match half {
        Some((h, b)) => (Some(h), b),
        None => (None, None),
    };
    Ok(ThetaReport { primary, half, bandwidth, half_bandwidth, class })
}

/// Result of a local supremum of `ϑ⁺` over pairs near a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaStar {
    pub center: usize,
    pub radius: f64,
    /// Largest finite `θ̂` over the evaluated pairs.
    pub value: f64,
    /// Some pair was classified divergent.
    pub divergent: bool,
    pub pairs: Vec<(usize, usize, ThetaClass)>,
}

/// `max θ̂` over pairs in the closed ball `B(x, radius)`: the `max_pairs`
/// most separated pairs at distance at least `min_separation`, plus the
/// most separated pair through `x` itself.
#[allow(clippy::too_many_arguments)]
pub fn theta_star_estimate<S: MetricMeasure + ?Sized>(
    space: &S,
    model: &HeatModel,
    x: usize,
    radius: f64,
    t_grid: &[f64],
    min_separation: f64,
    max_pairs: usize,
    settings: &ThetaSettings,
) -> Result<ThetaStar> {
    let ball: Vec<usize> = (0..space.len()).filter(|&i| space.dist(x, i) <= radius).collect();
    if ball.len() < 3 {
        return Err(invalid("radius", format!("ball around {x} holds {} points, need 3", ball.len())));
    }
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (a, &i) in ball.iter().enumerate() {
        for &j in &ball[a + 1..] {
            let d = space.dist(i, j);
            if d >= min_separation && i != x && j != x {
                pairs.push((i, j, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    pairs.truncate(max_pairs);
    let through_center = ball
        .iter()
        .filter(|&&j| j != x)
        .map(|&j| (x.min(j), x.max(j), space.dist(x, j)))
        .max_by(|a, b| a.2.total_cmp(&b.2).then((b.0, b.1).cmp(&(a.0, a.1))))
        .expect("ball has other points");
    pairs.push(through_center);
    let mut out = Vec::with_capacity(pairs.len());
    let mut value = f64::NEG_INFINITY;
    let mut divergent = false;
    for &(i, j, _) in &pairs {
        let est = theta_plus_estimate(space, model, i, j, t_grid, settings)?;
        match est.class {
            ThetaClass::Finite { theta } => value = value.max(theta),
            ThetaClass::Divergent { .. } => divergent = true,
            ThetaClass::Inconclusive => {}
        }
        out.push((i, j, est.class));
    }
    if divergent {
        value = f64::INFINITY;
    }
    Ok(ThetaStar { center: x, radius, value, divergent, pairs: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionEntry {
    pub x: usize,
    pub y: usize,
    pub t: f64,
    pub w2: f64,
    pub distance: f64,
    /// `W₂ / (e^{-Kt} d)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub k: f64,
    pub rel_tol: f64,
    pub entries: Vec<ContractionEntry>,
    pub worst_ratio: f64,
    pub holds: bool,
}

/// Checks `W₂(P̂_t δ_x, P̂_t δ_y) ≤ e^{-Kt} d(x, y) (1 + rel_tol)`.
pub fn contraction_check<S: MetricMeasure + ?Sized>(
    space: &S,
    model: &HeatModel,
    k: f64,
    pairs: &[(usize, usize)],
    t_grid: &[f64],
    rel_tol: f64,
) -> Result<ContractionReport> {
    let mut entries = Vec::new();
    for &(x, y) in pairs {
        let d = space.dist(x, y);
        if !(d > 0.0) {
            return Err(invalid("pairs", format!("pair ({x}, {y}) has distance zero")));
        }
        let positive: Vec<f64> = t_grid.iter().copied().filter(|t| *t > 0.0).collect();
        let ws = heat_distances(space, model, x, y, &positive)?;
        let mut it = ws.into_iter();
        for &t in t_grid {
            // δ_x and δ_y are coupled only by the product
            let w = if t == 0.0 { d } else { it.next().expect("one value per positive time") };
            entries.push(ContractionEntry { x, y, t, w2: w, distance: d, ratio: w / ((-k * t).exp() * d) });
        }
    }
    let worst_ratio = entries.iter().map(|e| e.ratio).fold(0.0, f64::max);
    Ok(ContractionReport { k, rel_tol, holds: worst_ratio <= 1.0 + rel_tol, entries, worst_ratio })
}

// ---------------------------------------------------------------------------
// Cone dichotomy

/// Which alternative of the vertex dichotomy the data supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dichotomy {
    /// `a ≈ 0`: the dual bound stays within `O(t)` of `d(o, p₀)` and the
    /// heat flow does not expand the distance.
    Flat,
    /// `a > 0`: the squared distance loses a `√t` defect, `ϑ⁺(o, p₀) = +∞`.
    Divergent,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomySettings {
    /// Bandwidth of the cone's graph generator; `None` for the default.
    pub eps: Option<f64>,
    /// Threshold below which `a` counts as zero; `None` derives it from
    /// the rounding error of the potential.
    pub a_tol: Option<f64>,
    /// Accepted deviation of the defect exponent from `1/2`.
    pub exponent_tol: f64,
    /// Relative tolerance on the `√t` coefficient against `2 c r₀ a`.
    pub coefficient_tol: f64,
    /// Gate on `max |g − r₀ − C t|`, relative to `r₀`.
    pub linear_tol: f64,
    /// Slack in `W₂ ≤ d(o, p₀)` and in `g ≤ d(o, p₀)`.
    pub step4_tol: f64,
    /// Exact `W₂` is computed when the cone has at most this many points.
    pub exact_limit: usize,
    pub half_resolution: bool,
}

impl Default for DichotomySettings {
    fn default() -> Self {
        Self {
            eps: None,
            a_tol: None,
            exponent_tol: 0.05,
            coefficient_tol: 0.2,
            linear_tol: 1e-3,
            step4_tol: 2e-2,
            exact_limit: EXACT_SUPPORT_LIMIT,
            half_resolution: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyRow {
    pub t: f64,
    /// `d(o, p₀)² − ∫∫ d² d(ν_p ⊗ ν_o)`, a lower bound for `d² − W₂²`.
    pub d_up: f64,
    pub product_cost: f64,
    /// Kantorovich–Rubinstein lower bound for `W₁ ≤ W₂`.
    pub g: f64,
    pub exact_w2: Option<f64>,
    /// Radial mass in the last cell of the vertex law.
    pub boundary_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub x0: usize,
    /// Index of `p₀ = (r₀, x0)` on the cone.
    pub p0: usize,
    /// Radius of the grid level used for `p₀`.
    pub r0: f64,
    pub a: f64,
    pub a_tol: f64,
    pub bandwidth: f64,
    /// First radial moment constant: `∫ s dν_o^t = c √t`.
    pub c: f64,
    /// `2 c r₀ a`, the predicted `√t` coefficient of `D_up`.
    pub predicted_coefficient: f64,
    pub rows: Vec<DichotomyRow>,
    /// `D_up ≈ A t^α + B t`.
    pub defect_fit: PowerLinearFit,
    /// `g − r₀ ≈ C t`: `(C, max deviation)`.
    pub dual_fit: (f64, f64),
    pub class: Dichotomy,
    /// Consistency failures of the bounds, each described in words.
    pub violations: Vec<String>,
    pub half: Option<Box<DichotomyReport>>,
}

/// Runs the vertex dichotomy for `p₀ = (r₀, x0)` on a flat cone.
pub fn cone_dichotomy(
    cone: &ConeSpace,
    x0: usize,
    r0: f64,
    t_grid: &[f64],
    settings: &DichotomySettings,
) -> Result<DichotomyReport> {
    let mut report = dichotomy_once(cone, x0, r0, t_grid, settings)?;
    if settings.half_resolution {
        let (coarse, map) = cone.base().coarse_rerun_space(&[x0])?;
        let half_cone = build_cone_on(coarse, 0.0, cone.dimension(), cone.grid().clone())?;
        let half = dichotomy_once(&half_cone, map[0], r0, t_grid, settings)?;
        if half.class != report.class {
            report.class = Dichotomy::Inconclusive;
        }
        report.half = Some(Box::new(half));
    }
    Ok(report)
}

fn dichotomy_once(
    cone: &ConeSpace,
    x0: usize,
    r0: f64,
    t_grid: &[f64],
    settings: &DichotomySettings,
) -> Result<DichotomyReport> {
    if cone.curvature() != 0.0 {
        return Err(Error::CurvedCone(cone.curvature()));
    }
    check_t_grid(t_grid, 4)?;
    let base = cone.base();
    if x0 >= base.len() {
        return Err(invalid("x0", format!("base point {x0} out of range")));
    }
    let level = cone.nearest_level(r0);
    if level == 0 {
        return Err(invalid("r0", "p0 must differ from the vertex"));
    }
    let p0 = cone.index(level, x0);
    let r0 = cone.radius(p0);
    let d = r0;

    let a = cos_potential(base, x0);
    let a_tol = settings.a_tol.unwrap_or_else(|| {
        let total = base.total_mass();
        let abs_sum: f64 = (0..base.len()).map(|y| (base.mass()[y] / total * base.dist(x0, y).cos()).abs()).sum();
        3.0 * base.len() as f64 * f64::EPSILON * abs_sum
    });
    let dim = cone.dimension();
    let c = bessel_first_moment_constant(dim);

    let model = build_generator_graph(cone, settings.eps)?;
    let bandwidth = model.bandwidth().expect("graph model");
    let bessel = BesselModel::new(dim, cone.grid())?;
    let phi = cone_dual_function(cone, x0)?;
    let exact = settings.exact_limit > 0 && cone.len() <= settings.exact_limit;

    let nus_p = model.heat_measures(p0, t_grid)?;
    let rows: Vec<DichotomyRow> = t_grid
        .par_iter()
        .zip(nus_p.par_iter())
        .map(|(&t, nu_p)| -> Result<DichotomyRow> {
            let law = bessel.law(0.0, t)?;
            let nu_o = cone.product_measure(&law.weights)?;
            let product_cost = product_coupling_cost(cone, nu_p, &nu_o)?;
            let g = kr_value(nu_p, &nu_o, &phi, 1.0);
            let exact_w2 = if exact { Some(w2(cone, &prune(nu_p)?, &prune(&nu_o)?)?) } else { None };
            Ok(DichotomyRow {
                t,
                d_up: d * d - product_cost,
                product_cost,
                g,
                exact_w2,
                boundary_mass: law.boundary_mass,
            })
        })
        .collect::<Result<_>>()?;

    let mut violations = Vec::new();
    for row in &rows {
        if row.boundary_mass > 1e-6 {
            violations.push(format!("t = {}: radial boundary mass {:.3e} exceeds 1e-6", row.t, row.boundary_mass));
        }
        if row.g > d * (1.0 + settings.step4_tol) {
            violations.push(format!("t = {}: dual bound g = {} exceeds d = {d}", row.t, row.g));
        }
        if let Some(w) = row.exact_w2 {
            if row.g > w * (1.0 + 1e-9) + 1e-12 {
                violations.push(format!("t = {}: dual bound g = {} exceeds W2 = {w}", row.t, row.g));
            }
            if w * w > row.product_cost * (1.0 + 1e-9) + 1e-12 {
                violations.push(format!("t = {}: W2^2 = {} exceeds product cost {}", row.t, w * w, row.product_cost));
            }
        }
    }

    let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let dups: Vec<f64> = rows.iter().map(|r| r.d_up).collect();
    let defect_fit = fit_power_plus_linear(&ts, &dups, 0.1, 0.95);
    let gdev: Vec<f64> = rows.iter().map(|r| r.g - r0).collect();
    let (slope, _) = fit_through_origin(&ts, &gdev);
    let max_dev = ts.iter().zip(&gdev).map(|(t, g)| (g - slope * t).abs()).fold(0.0, f64::max);
    let predicted = 2.0 * c * r0 * a;

    let class = if a > a_tol {
        let exponent_ok = (defect_fit.exponent - 0.5).abs() <= settings.exponent_tol;
        let coefficient_ok = (defect_fit.coefficient - predicted).abs() <= settings.coefficient_tol * predicted;
        if exponent_ok && coefficient_ok && violations.is_empty() {
            Dichotomy::Divergent
        } else {
            Dichotomy::Inconclusive
        }
    } else {
        let linear_ok = max_dev <= settings.linear_tol * r0;
        let step4_ok = rows.iter().all(|r| r.exact_w2.is_some_and(|w| w <= d * (1.0 + settings.step4_tol)));
        if linear_ok && step4_ok && violations.is_empty() {
            Dichotomy::Flat
        } else {
            Dichotomy::Inconclusive
        }
    };

    Ok(DichotomyReport {
        x0,
        p0,
        r0,
        a,
        a_tol,
        bandwidth,
        c,
        predicted_coefficient: predicted,
        rows,
        defect_fit,
        dual_fit: (slope, max_dev),
        class,
        violations,
        half: None,
    })
}

/// Drops weights below `1e-16` so exact transport runs on the effective
/// support; the discarded mass moves `W₂²` by at most `1e-16 · diam²` per
/// point.
fn prune(mu: &ProbMeasure) -> Result<ProbMeasure> {
    let w: Vec<f64> = mu.weights().iter().map(|&v| if v < 1e-16 { 0.0 } else { v }).collect();
    ProbMeasure::normalized(w)
}
