//! Families of runs of one experiment kind with an aggregated manifest.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use riccilab::curvature::Dichotomy;
use riccilab::functionals::KernelFunction;
use serde_json::Value;

use crate::config::{ConeSource, Experiment, ExperimentConfig, SpaceSource, TimeGrid, TolProfile};
use crate::manifest::RunManifest;
use crate::run::{co_movement, run, RunRecord, DISCREPANCY_FLOOR};
use crate::schema::{gnuplot_script, Table};
use crate::CliError;

/// Built-in families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    /// Metric perturbations of a Fibonacci sphere, `M_id` gap against
    /// distance-law discrepancy.
    Perturbation,
    /// Flat cones over circles of length `2πρ`, `ρ ∈ {0.5, 2/3, 0.9}`.
    ShortCircle,
}

pub fn family(which: Family, seed: u64, profile: TolProfile) -> Vec<ExperimentConfig> {
    let with = |experiment| ExperimentConfig { seed, tol_profile: profile, experiment };
    match which {
        Family::Perturbation => [0.0, 0.02, 0.05, 0.1, 0.15, 0.2]
            .into_iter()
            .map(|eta| {
                let sphere = SpaceSource::Sphere { dim: 2, radius: 1.0, n: 400 };
                let space = if eta == 0.0 { sphere } else { SpaceSource::Perturbed { base: Box::new(sphere), eta, seed: None } };
                with(Experiment::Mf {
                    space,
                    f: KernelFunction::Identity,
                    n: 2.0,
                    tol: None,
                    expect_equality: eta == 0.0,
                    clamp: true,
                })
            })
            .collect(),
        Family::ShortCircle => [0.5, 2.0 / 3.0, 0.9]
            .into_iter()
            .map(|rho: f64| {
                with(Experiment::Dichotomy {
                    cone: ConeSource::Build {
                        base: SpaceSource::Circle { circumference: 2.0 * PI * rho, n: 24 },
                        k: 0.0,
                        n: 1.0,
                        grid: "mixed:0.002:0.08:2.0".into(),
                    },
                    x0: 0,
                    r0: 1.0,
                    t_grid: TimeGrid { lo: 1e-4, hi: 1e-2, count: 6 },
                    eps: Some(0.003),
                    exact_limit: Some(0),
                    half_resolution: false,
                    expect: Some(Dichotomy::Divergent),
                    expect_a: Some((PI * rho).sin() / (PI * rho)),
                    a_tol: None,
                })
            })
            .collect(),
    }
}

/// Runs every config (each into `out_dir/run-NNN`) with at most
/// `parallelism` runs at once, then writes the aggregated manifest to
/// `out_dir`. Failed runs are reported and left out of the aggregates.
pub fn sweep(configs: &[ExperimentConfig], parallelism: usize, out_dir: &Path) -> Result<RunManifest, CliError> {
    let kind = configs.first().ok_or_else(|| CliError::Config("empty sweep".into()))?.experiment.kind();
    if let Some(other) = configs.iter().find(|c| c.experiment.kind() != kind) {
        return Err(CliError::Config(format!("sweep mixes kinds {kind} and {}", other.experiment.kind())));
    }
    for c in configs {
        c.validate()?;
    }
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| CliError::Run(e.to_string()))?;
    let records: Vec<Result<RunRecord, CliError>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, c)| run(c, &out_dir.join(format!("run-{i:03}"))))
            .collect()
    });

    let joined: String = configs.iter().map(|c| c.hash()).collect();
    let hash = {
        use sha2::{Digest, Sha256};
        Sha256::digest(joined.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    };
    let first = &configs[0];
    let profile = serde_json::to_value(first.tol_profile)?.as_str().unwrap_or_default().to_string();
    let mut manifest = RunManifest::new(&format!("sweep:{kind}"), hash, first.seed, &profile);
    let mut ok = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        match r {
            Ok(rec) => {
                manifest.check(&format!("run {i:03}"), rec.manifest.passed(), "all assertions pass")?;
                ok.push((i, rec));
            }
            Err(e) => manifest.errors.push(format!("run {i:03}: {e}")),
        }
    }

    let mut tables = Vec::new();
    match kind {
        "mf" => {
            let rows: Vec<(f64, f64, f64)> = ok
                .iter()
                .filter_map(|(i, rec)| {
                    let eta = match &configs[*i].experiment {
                        Experiment::Mf { space: SpaceSource::Perturbed { eta, .. }, .. } => *eta,
                        Experiment::Mf { .. } => 0.0,
                        _ => return None,
                    };
                    let r = &rec.report["result"];
                    Some((eta, r["gap"].as_f64()?, r["histogram_discrepancy"].as_f64()?))
                })
                .collect();
            if rows.len() >= 3 {
                let mut t = Table::new("almost-rigidity-sweep-table");
                for &(e, g, d) in &rows {
                    t.push(vec![e, g, d]);
                }
                tables.push(t);
                co_movement(&mut manifest, &rows, (first.tol(None, 5e-3), first.tol(None, DISCREPANCY_FLOOR)), 0.9)?;
            }
        }
        "dichotomy" => {
            let mut t = Table::new("sweep-dichotomy");
            for (i, rec) in &ok {
                let rho = match &configs[*i].experiment {
                    Experiment::Dichotomy {
                        cone: ConeSource::Build { base: SpaceSource::Circle { circumference, .. }, .. },
                        ..
                    } => circumference / (2.0 * PI),
                    _ => f64::NAN,
                };
                let d = &rec.report["result"]["dichotomy"];
                let get = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
                let closed = if rho.is_nan() { f64::NAN } else { (PI * rho).sin() / (PI * rho) };
                t.push(vec![*i as f64, rho, get(&d["a"]), closed, get(&d["defect_fit"]["exponent"])]);
            }
            tables.push(t);
        }
        _ => {}
    }
    for t in &tables {
        manifest.outputs.push(t.write(out_dir)?);
    }
    if !tables.is_empty() {
        std::fs::write(out_dir.join("sweep.gp"), gnuplot_script(&tables))?;
        manifest.outputs.push("sweep.gp".into());
    }
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.append_to(out_dir)?;
    Ok(manifest)
}

/// Reads a JSON list of configs.
pub fn load_list(path: &Path) -> Result<Vec<ExperimentConfig>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let list: Vec<ExperimentConfig> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed sweep config: {e}")))?;
    for c in &list {
        c.validate()?;
    }
    Ok(list)
}
