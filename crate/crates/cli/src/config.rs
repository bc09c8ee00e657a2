//! Experiment configuration: what to build, what to measure, and the
//! tolerances each assertion is held to.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use riccilab::curvature::Dichotomy;
use riccilab::functionals::KernelFunction;
use riccilab::geometry::{build_cone, suspension, ConeSpace, GridSpec};
use riccilab::mmspace::{circle, interval_model, perturb_metric, product_space, sphere_fibonacci};
use riccilab::numeric::logspace;
use riccilab::FiniteMMSpace;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Tolerance profile: `desk` doubles every default tolerance for quick
/// exploratory runs; explicit tolerances in a config are never rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TolProfile {
    #[default]
    Strict,
    Desk,
}

impl TolProfile {
    pub fn scale(self) -> f64 {
        match self {
            TolProfile::Strict => 1.0,
            TolProfile::Desk => 2.0,
        }
    }
}

/// A finite space, either generated or loaded from a space file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSource {
    Circle { circumference: f64, n: usize },
    Sphere { dim: u32, radius: f64, n: usize },
    Interval { dim: f64, n: usize },
    File { path: PathBuf },
    Product { left: Box<SpaceSource>, right: Box<SpaceSource>, cap: usize },
    /// Distances scaled by `1 + η·u`, `u` uniform on `[−1, 1]`, then
    /// repaired by shortest paths. `seed` defaults to the run seed.
    Perturbed { base: Box<SpaceSource>, eta: f64, seed: Option<u64> },
    Suspension { base: Box<SpaceSource>, n: f64, grid: String },
}

/// Parses a number, accepting `pi`, `2pi` and `1.5pi`.
fn parse_length(s: &str) -> Option<f64> {
    if let Some(head) = s.strip_suffix("pi") {
        let factor = if head.is_empty() { 1.0 } else { head.parse::<f64>().ok()? };
        return Some(factor * PI);
    }
    s.parse().ok()
}

impl FromStr for SpaceSource {
    type Err = CliError;

    /// `circle:LENGTH:N`, `sphere:DIM:RADIUS:N`, `interval:DIM:N`, or a path
    /// to a space file.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || CliError::Config(format!("cannot parse space `{s}`"));
        let num = |p: &str| parse_length(p).ok_or_else(bad);
        let count = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(match parts.as_slice() {
            ["circle", l, n] => SpaceSource::Circle { circumference: num(l)?, n: count(n)? },
            ["sphere", d, r, n] => SpaceSource::Sphere { dim: d.parse().map_err(|_| bad())?, radius: num(r)?, n: count(n)? },
            ["interval", d, n] => SpaceSource::Interval { dim: num(d)?, n: count(n)? },
            _ if s.ends_with(".json") => SpaceSource::File { path: PathBuf::from(s) },
            _ => return Err(bad()),
        })
    }
}

impl SpaceSource {
    pub fn build(&self, seed: u64) -> riccilab::Result<FiniteMMSpace> {
        match self {
            SpaceSource::Circle { circumference, n } => circle(*circumference, *n),
            SpaceSource::Sphere { dim, radius, n } => sphere_fibonacci(*dim, *radius, *n),
            SpaceSource::Interval { dim, n } => interval_model(*dim, *n),
            SpaceSource::File { path } => FiniteMMSpace::load_json(path),
            SpaceSource::Product { left, right, cap } => product_space(&left.build(seed)?, &right.build(seed)?, *cap),
            SpaceSource::Perturbed { base, eta, seed: own } => perturb_metric(&base.build(seed)?, *eta, own.unwrap_or(seed)),
            SpaceSource::Suspension { base, n, grid } => suspension(&base.build(seed)?, *n, &grid.parse()?)?.to_finite(),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        match self {
            SpaceSource::Circle { circumference, n } => {
                if !(*circumference > 0.0) || *n == 0 {
                    return fail("circle needs a positive circumference and n ≥ 1".into());
                }
            }
            SpaceSource::Sphere { dim, radius, n } => {
                if *dim != 2 || !(*radius > 0.0) || *n == 0 {
                    return fail("sphere needs dim = 2, a positive radius and n ≥ 1".into());
                }
            }
            SpaceSource::Interval { dim, n } => {
                if !(*dim >= 1.0) || *n < 2 {
                    return fail("interval model needs dim ≥ 1 and n ≥ 2".into());
                }
            }
            SpaceSource::File { path } => require_file(path)?,
            SpaceSource::Product { left, right, .. } => {
                left.validate()?;
                right.validate()?;
            }
            SpaceSource::Perturbed { base, eta, .. } => {
                if !(*eta >= 0.0 && *eta < 1.0) {
                    return fail(format!("perturbation eta = {eta} must lie in [0, 1)"));
                }
                base.validate()?;
            }
            SpaceSource::Suspension { base, n, grid } => {
                if !(*n >= 1.0) {
                    return fail("suspension needs N ≥ 1".into());
                }
                validate_grid(grid)?;
                base.validate()?;
            }
        }
        Ok(())
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("referenced file {} does not exist", path.display())))
    }
}

fn validate_grid(grid: &str) -> Result<(), CliError> {
    grid.parse::<GridSpec>().map(|_| ()).map_err(|e| CliError::Config(e.to_string()))
}

/// A cone, either built over a base space or loaded from a cone file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConeSource {
    Build { base: SpaceSource, k: f64, n: f64, grid: String },
    File { path: PathBuf },
}

impl ConeSource {
    pub fn build(&self, seed: u64) -> riccilab::Result<ConeSpace> {
        match self {
            ConeSource::Build { base, k, n, grid } => build_cone(&base.build(seed)?, *k, *n, &grid.parse()?),
            ConeSource::File { path } => ConeSpace::load_json(path),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        match self {
            ConeSource::Build { base, n, grid, .. } => {
                if !(*n >= 1.0) {
                    return Err(CliError::Config("cone needs N ≥ 1".into()));
                }
                validate_grid(grid)?;
                base.validate()
            }
            ConeSource::File { path } => require_file(path),
        }
    }
}

/// `count` log-spaced times from `lo` to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn times(&self) -> Vec<f64> {
        logspace(self.lo, self.hi, self.count)
    }

    fn validate(&self, min_count: usize) -> Result<(), CliError> {
        if !(self.lo > 0.0) || !(self.hi > self.lo) || self.count < min_count {
            return Err(CliError::Config(format!(
                "time grid needs 0 < lo < hi and at least {min_count} points, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl FromStr for TimeGrid {
    type Err = CliError;

    /// `LO:HI:COUNT`.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("cannot parse time grid `{s}`, expected LO:HI:COUNT"));
        match s.split(':').collect::<Vec<_>>().as_slice() {
            [lo, hi, n] => Ok(TimeGrid {
                lo: lo.parse().map_err(|_| bad())?,
                hi: hi.parse().map_err(|_| bad())?,
                count: n.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// A probability measure on a space given by role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "measure", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSource {
    Dirac { at: usize },
    /// The space's normalized reference measure.
    Reference,
    /// Normalized to total mass one.
    Weights { weights: Vec<f64> },
    /// Heat flow of a Dirac mass on the space's graph model.
    Heat { at: usize, t: f64, eps: Option<f64> },
}

impl FromStr for MeasureSource {
    type Err = CliError;

    /// `dirac:I`, `reference`, `heat:I:T`, or a comma-separated weight list.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("cannot parse measure `{s}`"));
        Ok(match s.split(':').collect::<Vec<_>>().as_slice() {
            ["dirac", i] => MeasureSource::Dirac { at: i.parse().map_err(|_| bad())? },
            ["reference"] => MeasureSource::Reference,
            ["heat", i, t] => MeasureSource::Heat { at: i.parse().map_err(|_| bad())?, t: t.parse().map_err(|_| bad())?, eps: None },
            _ => MeasureSource::Weights {
                weights: s.split(',').map(|w| w.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?,
            },
        })
    }
}

/// Second point of a ϑ⁺ pair: an index or the point nearest a distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTarget {
    Index(usize),
    Distance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Mf {
        space: SpaceSource,
        f: KernelFunction,
        n: f64,
        tol: Option<f64>,
        /// Assert `|gap| ≤ tol` instead of the one-sided `gap ≥ −tol`.
        #[serde(default)]
        expect_equality: bool,
        /// Clamp distances above `π` (needed for perturbed metrics).
        #[serde(default)]
        clamp: bool,
    },
    Bg {
        space: SpaceSource,
        center: usize,
        k: f64,
        n: f64,
        r_max: f64,
        r_count: usize,
        tol: Option<f64>,
    },
    Heat {
        space: SpaceSource,
        eps: Option<f64>,
        /// Dimension in the bound `2 N t`.
        n: f64,
        points: Vec<usize>,
        t_grid: TimeGrid,
        rel_tol: Option<f64>,
    },
    Ot {
        space: SpaceSource,
        mu: MeasureSource,
        nu: MeasureSource,
        p: u32,
        /// Entropic regularization; exact solver when absent.
        sinkhorn: Option<f64>,
    },
    Theta {
        space: SpaceSource,
        x: usize,
        y: PairTarget,
        t_grid: TimeGrid,
        eps: Option<f64>,
        /// Accepted range for θ̂ at both resolutions.
        bracket: Option<[f64; 2]>,
    },
    Dichotomy {
        cone: ConeSource,
        x0: usize,
        r0: f64,
        t_grid: TimeGrid,
        eps: Option<f64>,
        exact_limit: Option<usize>,
        #[serde(default = "yes")]
        half_resolution: bool,
        expect: Option<Dichotomy>,
        expect_a: Option<f64>,
        a_tol: Option<f64>,
    },
    SuspensionInvariance {
        space: SpaceSource,
        n: f64,
        grid: String,
        tol: Option<f64>,
    },
    AlmostRigiditySweep {
        space: SpaceSource,
        etas: Vec<f64>,
        f: KernelFunction,
        n: f64,
        min_correlation: Option<f64>,
    },
}

fn yes() -> bool {
    true
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Mf { .. } => "mf",
            Experiment::Bg { .. } => "bg",
            Experiment::Heat { .. } => "heat",
            Experiment::Ot { .. } => "ot",
            Experiment::Theta { .. } => "theta",
            Experiment::Dichotomy { .. } => "dichotomy",
            Experiment::SuspensionInvariance { .. } => "suspension-invariance",
            Experiment::AlmostRigiditySweep { .. } => "almost-rigidity-sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub tol_profile: TolProfile,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self { seed: 0, tol_profile: TolProfile::Strict, experiment }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Default tolerance scaled by the profile, or the explicit value.
    pub fn tol(&self, explicit: Option<f64>, default: f64) -> f64 {
        explicit.unwrap_or(default * self.tol_profile.scale())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        let positive = |v: Option<f64>, name: &str| match v {
            Some(x) if !(x > 0.0) => Err(CliError::Config(format!("{name} must be positive"))),
            _ => Ok(()),
        };
        match &self.experiment {
            Experiment::Mf { space, n, tol, .. } => {
                space.validate()?;
                positive(*tol, "tol")?;
                if !(*n >= 1.0) {
                    return fail("N must be at least 1");
                }
            }
            Experiment::Bg { space, n, r_max, r_count, tol, .. } => {
                space.validate()?;
                positive(*tol, "tol")?;
                if !(*n >= 1.0) || !(*r_max > 0.0) || *r_count == 0 {
                    return fail("bg needs N ≥ 1, r_max > 0 and r_count ≥ 1");
                }
            }
            Experiment::Heat { space, eps, n, points, t_grid, rel_tol } => {
                space.validate()?;
                positive(*eps, "eps")?;
                positive(*rel_tol, "rel_tol")?;
                t_grid.validate(1)?;
                if !(*n > 0.0) || points.is_empty() {
                    return fail("heat needs N > 0 and at least one point");
                }
            }
            Experiment::Ot { space, mu, nu, p, sinkhorn } => {
                space.validate()?;
                positive(*sinkhorn, "sinkhorn")?;
                if *p != 1 && *p != 2 {
                    return fail("p must be 1 or 2");
                }
                for m in [mu, nu] {
                    if let MeasureSource::Heat { t, eps, .. } = m {
                        positive(Some(*t), "heat time")?;
                        positive(*eps, "eps")?;
                    }
                }
            }
            Experiment::Theta { space, y, t_grid, eps, bracket, .. } => {
                space.validate()?;
                positive(*eps, "eps")?;
                t_grid.validate(6)?;
                if let PairTarget::Distance(d) = y {
                    positive(Some(*d), "distance")?;
                }
                if let Some([lo, hi]) = bracket {
                    if !(lo <= hi) {
                        return fail("bracket must be ordered");
                    }
                }
            }
            Experiment::Dichotomy { cone, r0, t_grid, eps, a_tol, .. } => {
                cone.validate()?;
                positive(Some(*r0), "r0")?;
                positive(*eps, "eps")?;
                positive(*a_tol, "a_tol")?;
                t_grid.validate(3)?;
            }
            Experiment::SuspensionInvariance { space, n, grid, tol } => {
                space.validate()?;
                positive(*tol, "tol")?;
                validate_grid(grid)?;
                if !(*n >= 1.0) {
                    return fail("N must be at least 1");
                }
            }
            Experiment::AlmostRigiditySweep { space, etas, n, min_correlation, .. } => {
                space.validate()?;
                if etas.len() < 3 || etas.iter().any(|e| !(*e >= 0.0 && *e < 1.0)) {
                    return fail("sweep needs at least three perturbations in [0, 1)");
                }
                if !(*n >= 1.0) {
                    return fail("N must be at least 1");
                }
                if let Some(c) = min_correlation {
                    if !(-1.0..=1.0).contains(c) {
                        return fail("min_correlation must lie in [-1, 1]");
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorthand_parsing() {
        assert_eq!(
            "circle:2pi:16".parse::<SpaceSource>().unwrap(),
            SpaceSource::Circle { circumference: 2.0 * PI, n: 16 }
        );
        assert_eq!("sphere:2:1:400".parse::<SpaceSource>().unwrap(), SpaceSource::Sphere { dim: 2, radius: 1.0, n: 400 });
        assert_eq!("interval:2.5:64".parse::<SpaceSource>().unwrap(), SpaceSource::Interval { dim: 2.5, n: 64 });
        assert!(matches!("a/b.json".parse::<SpaceSource>().unwrap(), SpaceSource::File { .. }));
        assert!("torus:3".parse::<SpaceSource>().is_err());
        assert!("circle:xpi:3".parse::<SpaceSource>().is_err());

        let g: TimeGrid = "1e-3:0.1:3".parse().unwrap();
        let t = g.times();
        assert_eq!(t.len(), 3);
        assert!((t[0] - 1e-3).abs() < 1e-15 && (t[1] - 1e-2).abs() < 1e-15 && (t[2] - 0.1).abs() < 1e-15);
        assert!("1:2".parse::<TimeGrid>().is_err());

        assert_eq!("dirac:4".parse::<MeasureSource>().unwrap(), MeasureSource::Dirac { at: 4 });
        assert_eq!("reference".parse::<MeasureSource>().unwrap(), MeasureSource::Reference);
        assert_eq!("heat:1:0.5".parse::<MeasureSource>().unwrap(), MeasureSource::Heat { at: 1, t: 0.5, eps: None });
        assert_eq!("1, 3".parse::<MeasureSource>().unwrap(), MeasureSource::Weights { weights: vec![1.0, 3.0] });
        assert!("dirac:x".parse::<MeasureSource>().is_err());
    }

    #[test]
    fn tolerances_scale_with_profile() {
        let mut c = ExperimentConfig::new(Experiment::Mf {
            space: SpaceSource::Circle { circumference: 1.0, n: 4 },
            f: KernelFunction::Cos,
            n: 1.0,
            tol: None,
            expect_equality: false,
            clamp: false,
        });
        assert_eq!(c.tol(None, 0.01), 0.01);
        c.tol_profile = TolProfile::Desk;
        assert_eq!(c.tol(None, 0.01), 0.02);
        assert_eq!(c.tol(Some(0.5), 0.01), 0.5);
        let h = c.hash();
        assert_eq!(h.len(), 64);
        c.seed += 1;
        assert_ne!(c.hash(), h);
    }
}
