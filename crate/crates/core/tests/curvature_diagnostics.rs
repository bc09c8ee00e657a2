use std::f64::consts::PI;

use riccilab::curvature::{cone_dichotomy, contraction_check, theta_plus_estimate, Dichotomy, DichotomySettings, ThetaSettings};
use riccilab::geometry::build_cone;
use riccilab::heat::build_generator_graph;
use riccilab::mmspace::circle;
use riccilab::numeric::logspace;
use riccilab::MetricMeasure;

#[test]
fn cos_potential_falls_with_the_cone_angle() {
    let settings = DichotomySettings { eps: Some(0.003), exact_limit: 0, half_resolution: false, ..Default::default() };
    let ts = logspace(1e-4, 1e-2, 6);
    let mut prev: Option<(f64, f64)> = None;
    for rho in [0.5, 2.0 / 3.0, 0.9] {
        let cone = build_cone(&circle(2.0 * PI * rho, 24).unwrap(), 0.0, 1.0, &"mixed:0.002:0.08:2.0".parse().unwrap()).unwrap();
        let rep = cone_dichotomy(&cone, 0, 1.0, &ts, &settings).unwrap();
        assert_eq!(rep.class, Dichotomy::Divergent, "rho = {rho}");
        let closed = (PI * rho).sin() / (PI * rho);
        assert!((rep.a - closed).abs() < 2e-3, "rho = {rho}: {} vs {closed}", rep.a);
        let coef = rep.defect_fit.coefficient;
        if let Some((a, c)) = prev {
            assert!(rep.a < a && coef < c);
        }
        prev = Some((rep.a, coef));
    }
}

#[test]
fn contraction_and_rate_agree_on_a_flat_circle() {
    let s = circle(2.0 * PI, 400).unwrap();
    let model = build_generator_graph(&s, Some(1e-4)).unwrap();
    let y = (0..s.len()).min_by(|&i, &j| (s.dist(0, i) - 1.0).abs().total_cmp(&(s.dist(0, j) - 1.0).abs())).unwrap();
    let ts = logspace(0.01, 0.1, 6);
    let rep = contraction_check(&s, &model, 0.0, &[(0, y)], &ts, 2e-2).unwrap();
    assert!(rep.holds, "worst ratio {}", rep.worst_ratio);
    let est = theta_plus_estimate(&s, &model, 0, y, &ts, &ThetaSettings::default()).unwrap();
    assert!(est.linear_fit.intercept >= -0.05, "{}", est.linear_fit.intercept);
}
