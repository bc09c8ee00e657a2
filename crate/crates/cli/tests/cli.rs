use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Stdio};

use riccilab::curvature::Dichotomy;
use riccilab::functionals::KernelFunction;
use riccilab_cli::config::{ConeSource, Experiment, ExperimentConfig, MeasureSource, PairTarget, SpaceSource, TimeGrid, TolProfile};
use riccilab_cli::manifest::read_manifests;
use riccilab_cli::schema::table;
use riccilab_cli::sweep::{family, sweep, Family};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_riccilab"));
    c.stdout(Stdio::null()).stderr(Stdio::null());
    c
}

fn every_kind() -> Vec<ExperimentConfig> {
    let sphere = SpaceSource::Sphere { dim: 2, radius: 1.0, n: 300 };
    let grid = TimeGrid { lo: 0.01, hi: 0.1, count: 6 };
    let kinds = vec![
        Experiment::Mf { space: sphere.clone(), f: KernelFunction::Cos, n: 2.0, tol: Some(0.1 + 0.2), expect_equality: true, clamp: false },
        Experiment::Bg { space: sphere.clone(), center: 3, k: 1.0, n: 2.0, r_max: PI, r_count: 7, tol: None },
        Experiment::Heat { space: sphere.clone(), eps: Some(1.0 / 3.0), n: 2.0, points: vec![0, 9], t_grid: grid, rel_tol: None },
        Experiment::Ot {
            space: sphere.clone(),
            mu: MeasureSource::Heat { at: 1, t: 0.05, eps: None },
            nu: MeasureSource::Weights { weights: (0..300).map(|i| if i % 3 == 0 { 0.1 + 0.2 } else { 1e-300 }).collect() },
            p: 2,
            sinkhorn: Some(0.05),
        },
        Experiment::Theta { space: sphere.clone(), x: 0, y: PairTarget::Distance(0.5), t_grid: grid, eps: None, bracket: Some([0.85, 1.13]) },
        Experiment::Dichotomy {
            cone: ConeSource::Build {
                base: SpaceSource::Perturbed { base: Box::new(SpaceSource::Circle { circumference: 2.0 * PI * 2.0 / 3.0, n: 24 }), eta: 0.01, seed: Some(7) },
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
            expect_a: Some(0.4135),
            a_tol: None,
        },
        Experiment::SuspensionInvariance { space: SpaceSource::Interval { dim: 2.5, n: 64 }, n: 1.0, grid: "lin:16:pi".into(), tol: None },
        Experiment::AlmostRigiditySweep { space: sphere, etas: vec![0.0, 0.05, 0.1], f: KernelFunction::Identity, n: 2.0, min_correlation: Some(0.9) },
    ];
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, experiment)| ExperimentConfig { seed: 12_345_678_901 + i as u64, tol_profile: TolProfile::Desk, experiment })
        .collect()
}

#[test]
fn configs_round_trip_exactly() {
    for cfg in every_kind() {
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn malformed_configs_exit_nonzero_without_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"seed": 1, "experiment": {"kind": "mf", "space": {"generator": "circle", "circumference": 6.0, "n": 0}, "f": "cos", "n": 1}}"#,
        r#"{"seed": 1, "experiment": {"kind": "warp"}}"#,
        r#"{"seed": 1, "extra": true, "experiment": {"kind": "mf", "space": {"generator": "circle", "circumference": 6.0, "n": 8}, "f": "cos", "n": 1}}"#,
        r#"{"seed": 1, "experiment": {"kind": "mf", "space": {"generator": "file", "path": "/nonexistent/space.json"}, "f": "cos", "n": 1}}"#,
        r#"{"seed": 1, "experiment": {"kind": "theta", "space": {"generator": "circle", "circumference": 6.0, "n": 8}, "x": 0, "y": {"index": 2}, "t_grid": {"lo": 0.1, "hi": 0.2, "count": 3}}}"#,
        "not json",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.json"));
        std::fs::write(&cfg, text).unwrap();
        let out = dir.path().join(format!("out{i}"));
        let status = bin().arg("--out-dir").arg(&out).arg("run").arg("--config").arg(&cfg).status().unwrap();
        assert_eq!(status.code(), Some(2), "case {i}");
        assert!(!out.exists(), "case {i} wrote output");
    }
}

#[test]
fn sphere_mf_passes_and_reports_gap() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["--out-dir"])
        .arg(dir.path())
        .args(["mf", "--space", "sphere:2:1:2000", "--f", "cos", "--n", "2", "--equality"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mf-report.json")).unwrap()).unwrap();
    assert!(report["result"]["gap"].as_f64().unwrap().abs() <= 5e-3);
    let manifests = read_manifests(dir.path()).unwrap();
    assert_eq!(manifests.len(), 1);
    assert!(manifests[0].passed());
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("theta.json");
    let mut c = every_kind().remove(4);
    c.tol_profile = TolProfile::Strict;
    std::fs::write(&cfg, c.to_json()).unwrap();
    for run in ["a", "b"] {
        let status = bin().arg("--out-dir").arg(dir.path().join(run)).arg("run").arg("--config").arg(&cfg).status().unwrap();
        assert!(status.code().is_some());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for name in ["theta-report.json", "theta-curve.csv", "theta.gp"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
    assert_eq!(read_manifests(&a).unwrap()[0].config_hash, c.hash());
}

#[test]
fn csv_headers_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in every_kind() {
        let out = dir.path().join(cfg.experiment.kind());
        let rec = riccilab_cli::run::run(&cfg, &out).unwrap();
        assert!(rec.manifest.errors.is_empty(), "{:?}", rec.manifest.errors);
        for name in rec.manifest.outputs.iter().filter(|n| n.ends_with(".csv")) {
            let text = read(&out, name);
            let header = text.lines().next().unwrap();
            let schema = table(name.trim_end_matches(".csv"));
            let want: Vec<&str> = schema.columns.iter().map(|c| c.name).collect();
            assert_eq!(header, want.join(","));
            assert!(text.lines().skip(1).all(|l| l.split(',').count() == want.len()));
        }
    }
    let status = bin().arg("schema").stdout(Stdio::piped()).output().unwrap();
    let dump: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert!(dump["tables"].as_array().unwrap().len() >= 8);
}

#[test]
fn module_errors_are_captured() {
    let dir = tempfile::tempdir().unwrap();
    // radii past π are outside the (1, 2) model's range
    let status = bin()
        .arg("--out-dir")
        .arg(dir.path())
        .args(["bg", "--space", "sphere:2:1:100", "--k", "1", "--n", "2", "--r-max", "4"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let m = &read_manifests(dir.path()).unwrap()[0];
    assert_eq!(m.errors.len(), 1);
    assert!(m.errors[0].contains("r_grid"));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "bg-report.json")).unwrap();
    assert_eq!(report["errors"].as_array().unwrap().len(), 1);
}

#[test]
fn short_circle_dichotomy_is_divergent() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .arg("--out-dir")
        .arg(dir.path())
        .args([
            "dichotomy", "--base", "circle:1.3333333333333333pi:24", "--grid", "mixed:0.002:0.08:2.0",
            "--t-grid", "1e-4:1e-2:6", "--eps", "0.003", "--exact-limit", "0", "--no-half", "--expect", "divergent",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let m = &read_manifests(dir.path()).unwrap()[0];
    let class = m.assertions().iter().find(|a| a.name == "classification").unwrap();
    assert!(class.pass && class.tolerance == "divergent");
}

#[test]
fn sweeps_assert_their_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let m = sweep(&family(Family::ShortCircle, 0, TolProfile::Strict), 2, dir.path()).unwrap();
    assert!(m.passed(), "{:?}", m.assertions());
    let csv = read(dir.path(), "sweep-dichotomy.csv");
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!((r[2] - r[3]).abs() <= 2e-3, "a = {} vs {}", r[2], r[3]);
    }
    assert!(rows.windows(2).all(|w| w[1][2] < w[0][2]));

    let pert = tempfile::tempdir().unwrap();
    let m = sweep(&family(Family::Perturbation, 3, TolProfile::Strict), 1, pert.path()).unwrap();
    assert!(m.passed(), "{:?}", m.assertions());
    let corr = m.assertions().iter().find(|a| a.name == "rank correlation eta–gap").unwrap();
    assert!(corr.measured >= 0.9);
    for name in ["rank correlation eta–discrepancy", "|gap| without perturbation", "discrepancy without perturbation"] {
        assert!(m.assertions().iter().any(|a| a.name == name && a.pass), "{name}");
    }

    let mut mixed = family(Family::ShortCircle, 0, TolProfile::Strict);
    mixed.push(every_kind().remove(0));
    assert!(sweep(&mixed, 1, dir.path()).is_err());
}

#[test]
fn space_and_cone_files_reload() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("c.json");
    assert!(bin().args(["space", "--space", "circle:2pi:16", "--out"]).arg(&space).status().unwrap().success());
    let cone = dir.path().join("cone.json");
    let status = bin()
        .args(["cone", "--base"])
        .arg(&space)
        .args(["--n", "1", "--grid", "lin:8:2", "--out"])
        .arg(&cone)
        .status()
        .unwrap();
    assert!(status.success());
    let mut cfg = ExperimentConfig::new(Experiment::Ot {
        space: SpaceSource::File { path: space.clone() },
        mu: MeasureSource::Dirac { at: 0 },
        nu: MeasureSource::Dirac { at: 4 },
        p: 1,
        sinkhorn: None,
    });
    cfg.validate().unwrap();
    if let Experiment::Ot { nu, .. } = &mut cfg.experiment {
        *nu = MeasureSource::Weights { weights: vec![1.0; 3] };
    }
    let err = riccilab_cli::run::run(&cfg, &dir.path().join("bad")).unwrap().manifest.errors;
    assert!(err[0].contains("3 weights for 16 points"), "{err:?}");
    if let Experiment::Ot { nu, .. } = &mut cfg.experiment {
        *nu = MeasureSource::Dirac { at: 4 };
    }
    let rec = riccilab_cli::run::run(&cfg, &dir.path().join("ot")).unwrap();
    assert!((rec.report["result"]["value"].as_f64().unwrap() - PI / 2.0).abs() < 1e-12);
    cfg.experiment = Experiment::SuspensionInvariance { space: SpaceSource::File { path: space }, n: 1.0, grid: "lin:16:pi".into(), tol: None };
    assert!(riccilab_cli::run::run(&cfg, &dir.path().join("sus")).unwrap().manifest.passed());
    assert!(ConeSource::File { path: cone }.build(0).is_ok());
}
