//! Executes one experiment and writes its report, curves and manifest.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use riccilab::curvature::{cone_dichotomy, theta_plus_with_rerun, DichotomySettings, ThetaClass, ThetaSettings};
use riccilab::functionals::{cos_potential, histogram_discrepancy, m_f, m_f_star, m_f_with, DEFAULT_HISTOGRAM_BINS};
use riccilab::geometry::{bishop_gromov_check, suspension};
use riccilab::heat::{build_generator_graph, variance_bound_check};
use riccilab::mmspace::{histogram_on, perturb_metric};
use riccilab::numeric::spearman;
use riccilab::transport::{sinkhorn, wasserstein, CostMatrix, EXACT_SUPPORT_LIMIT};
use riccilab::{FiniteMMSpace, MetricMeasure, ProbMeasure};
use serde_json::{json, Map, Value};

use crate::config::{Experiment, ExperimentConfig, MeasureSource, PairTarget};
use crate::manifest::{RunManifest, SCHEMA_VERSION};
use crate::schema::{gnuplot_script, Table};
use crate::CliError;

/// Iteration cap for entropic plans.
const SINKHORN_MAX_ITER: usize = 20_000;

/// What a run produced: the manifest and the report it wrote.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub report: Value,
}

/// Results accumulated while an experiment executes, so a failure midway
/// still leaves everything computed so far.
#[derive(Default)]
struct Partial {
    fields: Map<String, Value>,
    tables: Vec<Table>,
}

impl Partial {
    fn set(&mut self, key: &str, value: Value) {
        self.fields.insert(key.to_string(), value);
    }
}

/// Runs a validated config, writing `<kind>-report.json`, the CSV curves,
/// a gnuplot script and one line of `manifest.jsonl` into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord, CliError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let kind = config.experiment.kind();
    let profile = serde_json::to_value(config.tol_profile)?.as_str().unwrap_or_default().to_string();
    let mut manifest = RunManifest::new(kind, config.hash(), config.seed, &profile);
    let start = Instant::now();
    let mut partial = Partial::default();
    if let Err(e) = execute(config, &mut partial, &mut manifest) {
        manifest.errors.push(format!("{kind}: {e}"));
    }
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();

    let mut report = Map::new();
    report.insert("schema_version".into(), json!(SCHEMA_VERSION));
    report.insert("kind".into(), json!(kind));
    report.insert("config_hash".into(), json!(manifest.config_hash));
    report.insert("config".into(), serde_json::to_value(config)?);
    report.insert("result".into(), Value::Object(partial.fields));
    report.insert("errors".into(), json!(manifest.errors));
    let report = Value::Object(report);
    let report_name = format!("{kind}-report.json");
    std::fs::write(out_dir.join(&report_name), serde_json::to_string_pretty(&report)?)?;
    manifest.outputs.push(report_name);
    for t in &partial.tables {
        manifest.outputs.push(t.write(out_dir)?);
    }
    if !partial.tables.is_empty() {
        let script = format!("{kind}.gp");
        std::fs::write(out_dir.join(&script), gnuplot_script(&partial.tables))?;
        manifest.outputs.push(script);
    }
    manifest.append_to(out_dir)?;
    Ok(RunRecord { manifest, report })
}

fn execute(config: &ExperimentConfig, out: &mut Partial, manifest: &mut RunManifest) -> Result<(), CliError> {
    let seed = config.seed;
    match &config.experiment {
        Experiment::Mf { space, f, n, tol, expect_equality, clamp } => {
            let space = space.build(seed)?;
            let tol = config.tol(*tol, 5e-3);
            let value = m_f_with(&space, f, *clamp)?;
            let star = m_f_star(*n, f, 256)?;
            let gap = if f.is_increasing() { star - value } else { value - star };
            out.set("m_f", json!(value));
            out.set("m_f_star", json!(star));
            out.set("gap", json!(gap));
            let potentials: Vec<f64> = (0..space.len()).into_par_iter().map(|x| cos_potential(&space, x)).collect();
            let worst = potentials.iter().copied().fold(f64::INFINITY, f64::min);
            out.set("worst_cos_potential", json!(worst));
            let bins = DEFAULT_HISTOGRAM_BINS;
            out.set("histogram_discrepancy", json!(histogram_discrepancy(&space, *n, bins)?));
            out.tables.push(histogram_table(&space, *n, bins)?);
            if *expect_equality {
                manifest.at_most("|gap|", gap.abs(), tol)?;
            } else {
                manifest.at_least("gap", gap, -tol)?;
            }
        }
        Experiment::Bg { space, center, k, n, r_max, r_count, tol } => {
            let space = space.build(seed)?;
            let radii: Vec<f64> = (1..=*r_count).map(|i| r_max * i as f64 / *r_count as f64).collect();
            let p = bishop_gromov_check(&space, *center, *k, *n, &radii)?;
            let mut t = Table::new("bg-profile");
            for i in 0..p.r.len() {
                t.push(vec![p.r[i], p.v[i], p.model_v[i], p.margins[i]]);
            }
            out.tables.push(t);
            manifest.at_least("min margin", p.min_margin, -config.tol(*tol, 1e-2))?;
            out.set("profile", serde_json::to_value(&p)?);
        }
        Experiment::Heat { space, eps, n, points, t_grid, rel_tol } => {
            let space = space.build(seed)?;
            let model = build_generator_graph(&space, *eps)?;
            out.set("bandwidth", json!(model.bandwidth()));
            let rel_tol = config.tol(*rel_tol, 0.05);
            let rep = variance_bound_check(&space, &model, *n, points, &t_grid.times(), rel_tol)?;
            let mut t = Table::new("heat-variance");
            for e in &rep.entries {
                t.push(vec![e.point as f64, e.t, e.w2_sq, e.bound, e.ratio]);
            }
            out.tables.push(t);
            manifest.at_most("worst W2²/(2Nt)", rep.worst_ratio, 1.0 + rel_tol)?;
            out.set("variance", serde_json::to_value(&rep)?);
        }
        Experiment::Ot { space, mu, nu, p, sinkhorn: reg } => {
            let space = space.build(seed)?;
            let mu = measure(&space, mu)?;
            let nu = measure(&space, nu)?;
            let res = match reg {
                Some(e) => sinkhorn(&mu, &nu, &CostMatrix::from_space(&space, *p)?, *e, SINKHORN_MAX_ITER)?,
                None => wasserstein(&space, &mu, &nu, *p)?,
            };
            let mut t = Table::new("ot-coupling");
            for &(i, j, m) in &res.coupling.entries {
                t.push(vec![i as f64, j as f64, m]);
            }
            out.tables.push(t);
            out.set("solver", json!(if reg.is_some() { "sinkhorn" } else { "exact" }));
            out.set("cost", json!(res.cost));
            out.set("value", json!(res.value));
            out.set("raw_cost", json!(res.raw_cost));
            out.set("diagnostics", serde_json::to_value(&res.diagnostics)?);
            manifest.at_most("marginal error", res.coupling.marginal_error(), 1e-9)?;
        }
        Experiment::Theta { space, x, y, t_grid, eps, bracket } => {
            let space = space.build(seed)?;
            if *x >= space.len() {
                return Err(CliError::Run(format!("point {x} out of range")));
            }
            let y = match y {
                PairTarget::Index(j) => *j,
                PairTarget::Distance(d) => space.point_at_distance(*x, *d),
            };
            let rep = theta_plus_with_rerun(&space, *eps, *x, y, &t_grid.times(), &ThetaSettings::default())?;
            let mut t = Table::new("theta-curve");
            for (i, &time) in rep.primary.t_grid.iter().enumerate() {
                let (hw, hv) = rep.half.as_ref().map_or((f64::NAN, f64::NAN), |h| (h.w2[i], h.values[i]));
                t.push(vec![time, rep.primary.w2[i], rep.primary.values[i], hw, hv]);
            }
            out.tables.push(t);
            out.set("theta", serde_json::to_value(&rep)?);
            manifest.check("conclusive at both resolutions", rep.class != ThetaClass::Inconclusive, "finite or divergent, in agreement")?;
            if let Some([lo, hi]) = bracket {
                for (label, est) in [("full", Some(&rep.primary)), ("half", rep.half.as_ref())] {
                    let theta = match est.map(|e| e.class) {
                        Some(ThetaClass::Finite { theta }) => theta,
                        _ => f64::NAN,
                    };
                    manifest.within(&format!("theta {label} resolution"), theta, *lo, *hi)?;
                }
            }
        }
        Experiment::Dichotomy { cone, x0, r0, t_grid, eps, exact_limit, half_resolution, expect, expect_a, a_tol } => {
            let cone = cone.build(seed)?;
            let settings = DichotomySettings {
                eps: *eps,
                exact_limit: exact_limit.unwrap_or(EXACT_SUPPORT_LIMIT),
                half_resolution: *half_resolution,
                ..Default::default()
            };
            out.set("cone_points", json!(cone.len()));
            let rep = cone_dichotomy(&cone, *x0, *r0, &t_grid.times(), &settings)?;
            let mut t = Table::new("dichotomy-rows");
            for r in &rep.rows {
                t.push(vec![r.t, r.d_up, r.product_cost, r.g, r.exact_w2.unwrap_or(f64::NAN), r.boundary_mass]);
            }
            out.tables.push(t);
            out.set("dichotomy", serde_json::to_value(&rep)?);
            manifest.at_most("bound violations", rep.violations.len() as f64, 0.0)?;
            if let Some(want) = expect {
                let label = serde_json::to_value(want)?.as_str().unwrap_or_default().to_string();
                manifest.check("classification", rep.class == *want, &label)?;
                if let Some(h) = &rep.half {
                    manifest.check("half-resolution classification", h.class == *want, &label)?;
                }
            }
            if let Some(a) = expect_a {
                manifest.at_most("|a − expected|", (rep.a - a).abs(), config.tol(*a_tol, 2e-3))?;
            }
        }
        Experiment::SuspensionInvariance { space, n, grid, tol } => {
            let base = space.build(seed)?;
            let sus = suspension(&base, *n, &grid.parse()?)?;
            let f = riccilab::functionals::KernelFunction::Cos;
            let (b, s) = (m_f(&base, &f)?, m_f(&sus, &f)?);
            let mut t = Table::new("suspension-invariance-summary");
            t.push(vec![b, s, s - b]);
            out.tables.push(t);
            out.set("base_m_cos", json!(b));
            out.set("suspension_m_cos", json!(s));
            manifest.at_most("|ΔM_cos|", (s - b).abs(), config.tol(*tol, 1e-2))?;
        }
        Experiment::AlmostRigiditySweep { space, etas, f, n, min_correlation } => {
            let base = space.build(seed)?;
            let star = m_f_star(*n, f, 256)?;
            let rows = etas
                .iter()
                .map(|&eta| {
                    let s = if eta == 0.0 { base.clone() } else { perturb_metric(&base, eta, seed)? };
                    let v = m_f_with(&s, f, true)?;
                    let gap = if f.is_increasing() { star - v } else { v - star };
                    Ok((eta, gap, histogram_discrepancy(&s, *n, DEFAULT_HISTOGRAM_BINS)?))
                })
                .collect::<riccilab::Result<Vec<_>>>()?;
            let mut t = Table::new("almost-rigidity-sweep-table");
            for &(e, g, d) in &rows {
                t.push(vec![e, g, d]);
            }
            out.tables.push(t);
            co_movement(manifest, &rows, (config.tol(None, 5e-3), config.tol(None, DISCREPANCY_FLOOR)), min_correlation.unwrap_or(0.9))?;
            out.set("rows", serde_json::to_value(&rows)?);
        }
    }
    Ok(())
}

/// Assertions of a perturbation family: `(eta, gap, discrepancy)` rows.
/// L¹ histogram discrepancy accepted for an unperturbed space: 32 bins
/// over a few hundred points leave about 0.05 of sampling noise.
pub(crate) const DISCREPANCY_FLOOR: f64 = 0.1;

/// Rows are `(eta, gap, discrepancy)`; tolerances are `(gap, discrepancy)`
/// at `eta = 0`.
pub(crate) fn co_movement(
    manifest: &mut RunManifest,
    rows: &[(f64, f64, f64)],
    (gap_tol, disc_tol): (f64, f64),
    min_corr: f64,
) -> Result<(), CliError> {
    let eta: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let gap: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let disc: Vec<f64> = rows.iter().map(|r| r.2).collect();
    if let Some(r) = rows.iter().find(|r| r.0 == 0.0) {
        manifest.at_most("|gap| without perturbation", r.1.abs(), gap_tol)?;
        manifest.at_most("discrepancy without perturbation", r.2, disc_tol)?;
    }
    manifest.at_least("rank correlation eta–gap", spearman(&eta, &gap), min_corr)?;
    manifest.at_least("rank correlation eta–discrepancy", spearman(&eta, &disc), min_corr)?;
    Ok(())
}

fn histogram_table(space: &FiniteMMSpace, n: f64, bins: usize) -> Result<Table, CliError> {
    let hist = histogram_on(space, bins, PI)?;
    let empirical = hist.normalized();
    let w = |t: f64| if n == 1.0 { 1.0 } else { t.sin().max(0.0).powf(n - 1.0) };
    let model: Vec<f64> = (0..bins)
        .map(|b| riccilab::quadrature::quad(w, hist.edges[b], hist.edges[b + 1]))
        .collect::<riccilab::Result<_>>()?;
    let total: f64 = model.iter().sum();
    let mut t = Table::new("mf-histogram");
    for b in 0..bins {
        t.push(vec![hist.edges[b], hist.edges[b + 1], empirical[b], model[b] / total]);
    }
    Ok(t)
}

fn measure(space: &FiniteMMSpace, src: &MeasureSource) -> Result<ProbMeasure, CliError> {
    let n = space.len();
    let in_range = |i: usize| {
        if i < n {
            Ok(i)
        } else {
            Err(CliError::Run(format!("point {i} out of range for {n} points")))
        }
    };
    Ok(match src {
        MeasureSource::Dirac { at } => ProbMeasure::dirac(n, in_range(*at)?),
        MeasureSource::Reference => ProbMeasure::from_space(space),
        MeasureSource::Weights { weights } if weights.len() != n => {
            return Err(CliError::Run(format!("{} weights for {n} points", weights.len())))
        }
        MeasureSource::Weights { weights } => ProbMeasure::normalized(weights.clone())?,
        MeasureSource::Heat { at, t, eps } => build_generator_graph(space, *eps)?.heat_measure(in_range(*at)?, *t)?,
    })
}
