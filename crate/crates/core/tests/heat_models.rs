use riccilab::geometry::RadialGrid;
use riccilab::heat::{bessel_monte_carlo, build_generator_graph, BesselModel};
use riccilab::mmspace::{perturb_metric, sphere_fibonacci};
use riccilab::MetricMeasure;

#[test]
fn radial_second_moment_grows_linearly() {
    let dim = 2.0;
    let grid = RadialGrid::from_spec(&"mixed:0.0005:0.01:3.5".parse().unwrap()).unwrap();
    let model = BesselModel::new(dim, &grid).unwrap();
    for t in [0.01, 0.03, 0.1] {
        let law = model.law(0.0, t).unwrap();
        let m2 = law.moment(2.0);
        assert!((m2 / (2.0 * (dim + 1.0) * t) - 1.0).abs() < 1e-2, "t = {t}: {m2}");
        assert!(law.boundary_mass < 1e-12);
    }
}

#[test]
fn radial_law_matches_simulation() {
    let dim = 2.0;
    let grid = RadialGrid::from_spec(&"mixed:0.0005:0.01:3.5".parse().unwrap()).unwrap();
    let model = BesselModel::new(dim, &grid).unwrap();
    let ts = [0.02, 0.05];
    let mc = bessel_monte_carlo(dim, 0.5, &ts, 40_000, 1e-4, 5).unwrap();
    for (s, &t) in mc.iter().zip(&ts) {
        let pde = model.law(0.5, t).unwrap().moment(2.0);
        assert!((s.second - pde).abs() <= 5.0 * s.second_stderr + 1e-3 * pde, "t = {t}: MC {} vs {pde}", s.second);
    }
    // same seed, same paths
    let again = bessel_monte_carlo(dim, 0.5, &ts, 40_000, 1e-4, 5).unwrap();
    assert_eq!(again[1].second, mc[1].second);
}

#[test]
fn graph_heat_flow_is_a_markov_semigroup() {
    let s = perturb_metric(&sphere_fibonacci(2, 1.0, 300).unwrap(), 0.05, 3).unwrap();
    let model = build_generator_graph(&s, None).unwrap();
    let (rows, symmetry, _) = model.invariant_defects();
    assert!(rows < 1e-10 && symmetry < 1e-10);
    let mu = model.heat_measure(7, 0.05).unwrap();
    let w = mu.weights();
    assert!(w.iter().all(|&p| p >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // semigroup: P_{s+t} = P_t P_s
    let f: Vec<f64> = (0..s.len()).map(|i| s.dist(0, i).cos()).collect();
    let once = model.apply(0.08, &f).unwrap();
    let twice = model.apply(0.05, &model.apply(0.03, &f).unwrap()).unwrap();
    let err = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}
