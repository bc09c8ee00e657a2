use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riccilab::curvature::Dichotomy;
use riccilab::functionals::KernelFunction;
use riccilab::geometry::GridSpec;
use riccilab::mmspace::validate_space;
use riccilab::MetricMeasure;
use riccilab_cli::config::{ConeSource, Experiment, ExperimentConfig, MeasureSource, PairTarget, SpaceSource, TimeGrid, TolProfile};
use riccilab_cli::run::run;
use riccilab_cli::schema::schema_dump;
use riccilab_cli::sweep::{family, load_list, sweep, Family};
use riccilab_cli::CliError;

#[derive(Parser)]
#[command(name = "riccilab", version, about = "Curvature experiments on finite metric measure spaces")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for perturbations; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "riccilab-out")]
    out_dir: PathBuf,
    /// Default tolerances; overrides the config's profile.
    #[arg(long, global = true, value_enum)]
    tol_profile: Option<TolProfile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a space, validate it, and write it as a space file.
    Space {
        /// `circle:LENGTH:N`, `sphere:2:RADIUS:N`, `interval:DIM:N` or a space file.
        #[arg(long)]
        space: SpaceSource,
        /// Output file (default: OUT_DIR/space.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a (K, N)-cone over a base and write it as a cone file.
    Cone {
        #[arg(long)]
        base: SpaceSource,
        #[arg(long, default_value_t = 0.0)]
        k: f64,
        #[arg(long)]
        n: f64,
        /// `lin:COUNT:RMAX`, `geo:COUNT:RMIN:RMAX` or `mixed:RMIN:HMAX:RMAX[:RATIO]`.
        #[arg(long)]
        grid: GridSpec,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare M_f with its model value.
    Mf {
        #[arg(long)]
        space: SpaceSource,
        /// identity, square or cos.
        #[arg(long, default_value = "identity")]
        f: String,
        #[arg(long)]
        n: f64,
        #[arg(long)]
        tol: Option<f64>,
        /// Require |gap| ≤ tol.
        #[arg(long)]
        equality: bool,
        /// Clamp distances above π.
        #[arg(long)]
        clamp: bool,
    },
    /// Ball-volume comparison with the (K, N) model.
    Bg {
        #[arg(long)]
        space: SpaceSource,
        #[arg(long, default_value_t = 0)]
        center: usize,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        n: f64,
        #[arg(long)]
        r_max: f64,
        #[arg(long, default_value_t = 20)]
        r_count: usize,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Heat-flow variance bound W₂(P̂_t δ_x, δ_x)² ≤ 2 N t.
    Heat {
        #[arg(long)]
        space: SpaceSource,
        #[arg(long)]
        n: f64,
        /// Comma-separated point indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        points: Vec<usize>,
        /// `LO:HI:COUNT`, log-spaced.
        #[arg(long)]
        t_grid: TimeGrid,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        rel_tol: Option<f64>,
    },
    /// Optimal transport between two measures on a space.
    Ot {
        #[arg(long)]
        space: SpaceSource,
        /// `dirac:I`, `reference`, `heat:I:T`, or comma-separated weights.
        #[arg(long)]
        mu: MeasureSource,
        #[arg(long)]
        nu: MeasureSource,
        #[arg(long, default_value_t = 2)]
        p: u32,
        /// Entropic regularization (exact solver if absent).
        #[arg(long)]
        sinkhorn: Option<f64>,
    },
    /// Short-time contraction rate of the heat flow for a pair.
    Theta {
        #[arg(long)]
        space: SpaceSource,
        #[arg(long, default_value_t = 0)]
        x: usize,
        #[arg(long, conflicts_with = "distance", required_unless_present = "distance")]
        y: Option<usize>,
        /// Pick the second point nearest this distance from x.
        #[arg(long)]
        distance: Option<f64>,
        #[arg(long)]
        t_grid: TimeGrid,
        #[arg(long)]
        eps: Option<f64>,
        /// `LO:HI` accepted range for the estimate.
        #[arg(long, allow_hyphen_values = true)]
        bracket: Option<String>,
    },
    /// Heat-flow dichotomy at the vertex of a flat cone.
    Dichotomy {
        #[arg(long)]
        base: SpaceSource,
        #[arg(long, default_value_t = 1.0)]
        n: f64,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        x0: usize,
        #[arg(long, default_value_t = 1.0)]
        r0: f64,
        #[arg(long)]
        t_grid: TimeGrid,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        exact_limit: Option<usize>,
        /// Skip the half-resolution rerun.
        #[arg(long)]
        no_half: bool,
        /// flat or divergent.
        #[arg(long)]
        expect: Option<String>,
        #[arg(long)]
        expect_a: Option<f64>,
        #[arg(long)]
        a_tol: Option<f64>,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run a family of experiments of one kind.
    Sweep {
        /// JSON list of configs.
        #[arg(long, conflicts_with = "family", required_unless_present = "family")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        family: Option<Family>,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print the CSV column documentation.
    Schema,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_kernel(s: &str) -> Result<KernelFunction, CliError> {
    match s {
        "identity" | "id" => Ok(KernelFunction::Identity),
        "square" => Ok(KernelFunction::Square),
        "cos" => Ok(KernelFunction::Cos),
        _ => Err(CliError::Config(format!("unknown function `{s}`, expected identity, square or cos"))),
    }
}

fn parse_bracket(s: &str) -> Result<[f64; 2], CliError> {
    let bad = || CliError::Config(format!("cannot parse bracket `{s}`, expected LO:HI"));
    match s.split(':').collect::<Vec<_>>().as_slice() {
        [lo, hi] => Ok([lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?]),
        _ => Err(bad()),
    }
}

fn parse_dichotomy(s: &str) -> Result<Dichotomy, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("unknown classification `{s}`, expected flat or divergent")))
}

/// Applies the global flags to a config.
fn finish(cli: &Cli, mut cfg: ExperimentConfig) -> ExperimentConfig {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.tol_profile {
        cfg.tol_profile = p;
    }
    cfg
}

fn write_json_file(out: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, text)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool, CliError> {
    let experiment = match &cli.command {
        Command::Schema => {
            println!("{}", schema_dump());
            return Ok(true);
        }
        Command::Space { space, out } => {
            let s = space.build(cli.seed.unwrap_or(0))?;
            let report = validate_space(&s, false);
            println!("{} points, diameter {:.6}, {report}", s.len(), s.diameter());
            let out = out.clone().unwrap_or_else(|| cli.out_dir.join("space.json"));
            write_json_file(&out, &serde_json::to_string(&s.to_file())?)?;
            return Ok(report.is_valid());
        }
        Command::Cone { base, k, n, grid, out } => {
            let cone = riccilab::geometry::build_cone(&base.build(cli.seed.unwrap_or(0))?, *k, *n, grid)?;
            println!("{} points over {} levels", cone.len(), cone.levels());
            let out = out.clone().unwrap_or_else(|| cli.out_dir.join("cone.json"));
            write_json_file(&out, &serde_json::to_string(&cone.to_file()?)?)?;
            return Ok(true);
        }
        Command::Run { config, print_config } => {
            let cfg = finish(cli, ExperimentConfig::load(config)?);
            if *print_config {
                println!("{}", cfg.to_json());
                return Ok(true);
            }
            return report(&cfg, &cli.out_dir);
        }
        Command::Sweep { config, family: fam, parallel } => {
            let configs = match (config, fam) {
                (Some(path), _) => load_list(path)?.into_iter().map(|c| finish(cli, c)).collect(),
                (None, Some(f)) => family(*f, cli.seed.unwrap_or(0), cli.tol_profile.unwrap_or_default()),
                (None, None) => return Err(CliError::Config("sweep needs --config or --family".into())),
            };
            let m = sweep(&configs, *parallel, &cli.out_dir)?;
            print_assertions(&m);
            return Ok(m.passed());
        }
        Command::Mf { space, f, n, tol, equality, clamp } => Experiment::Mf {
            space: space.clone(),
            f: parse_kernel(f)?,
            n: *n,
            tol: *tol,
            expect_equality: *equality,
            clamp: *clamp,
        },
        Command::Bg { space, center, k, n, r_max, r_count, tol } => Experiment::Bg {
            space: space.clone(),
            center: *center,
            k: *k,
            n: *n,
            r_max: *r_max,
            r_count: *r_count,
            tol: *tol,
        },
        Command::Heat { space, n, points, t_grid, eps, rel_tol } => Experiment::Heat {
            space: space.clone(),
            eps: *eps,
            n: *n,
            points: points.clone(),
            t_grid: *t_grid,
            rel_tol: *rel_tol,
        },
        Command::Ot { space, mu, nu, p, sinkhorn } => Experiment::Ot {
            space: space.clone(),
            mu: mu.clone(),
            nu: nu.clone(),
            p: *p,
            sinkhorn: *sinkhorn,
        },
        Command::Theta { space, x, y, distance, t_grid, eps, bracket } => Experiment::Theta {
            space: space.clone(),
            x: *x,
            y: match (y, distance) {
                (Some(j), _) => PairTarget::Index(*j),
                (None, Some(d)) => PairTarget::Distance(*d),
                (None, None) => return Err(CliError::Config("theta needs --y or --distance".into())),
            },
            t_grid: *t_grid,
            eps: *eps,
            bracket: bracket.as_deref().map(parse_bracket).transpose()?,
        },
        Command::Dichotomy { base, n, grid, x0, r0, t_grid, eps, exact_limit, no_half, expect, expect_a, a_tol } => {
            Experiment::Dichotomy {
                cone: ConeSource::Build { base: base.clone(), k: 0.0, n: *n, grid: grid.clone() },
                x0: *x0,
                r0: *r0,
                t_grid: *t_grid,
                eps: *eps,
                exact_limit: *exact_limit,
                half_resolution: !no_half,
                expect: expect.as_deref().map(parse_dichotomy).transpose()?,
                expect_a: *expect_a,
                a_tol: *a_tol,
            }
        }
    };
    let cfg = finish(cli, ExperimentConfig::new(experiment));
    cfg.validate()?;
    report(&cfg, &cli.out_dir)
}

fn report(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool, CliError> {
    let rec = run(cfg, out_dir)?;
    print_assertions(&rec.manifest);
    Ok(rec.manifest.passed())
}

fn print_assertions(m: &riccilab_cli::manifest::RunManifest) {
    for a in m.assertions() {
        println!("{} {}: {:.6e} {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.measured, a.tolerance);
    }
    for e in &m.errors {
        println!("ERROR {e}");
    }
    println!("{} in {:.1} s, outputs: {}", m.kind, m.wall_clock_seconds, m.outputs.join(", "));
}
