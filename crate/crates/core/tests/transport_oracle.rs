mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riccilab::mmspace::circle;
use riccilab::transport::{sinkhorn, solve_ot_exact, solve_transport, w1, w2, CostMatrix};
use riccilab::ProbMeasure;

#[test]
fn oracle_handles_trivial_polytopes() {
    // a point mass has exactly one coupling
    let b = [0.25, 0.5, 0.25];
    assert!((common::enumeration_ot(&[1.0], &b, &[1.0, 2.0, 3.0]) - 2.0).abs() < 1e-15);
    // 2 × 2 with the anti-diagonal cheaper
    let v = common::enumeration_ot(&[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0, 0.0, 1.0]);
    assert!(v.abs() < 1e-15);
    // uneven marginals force some diagonal mass
    let v = common::enumeration_ot(&[0.7, 0.3], &[0.5, 0.5], &[1.0, 0.0, 0.0, 1.0]);
    assert!((v - 0.2).abs() < 1e-15);
}

#[test]
fn exact_solver_agrees_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in [1, 2] {
        for _ in 0..60 {
            let (a, b, c) = common::random_instance(&mut rng, 7);
            let cost = CostMatrix::new(a.len(), b.len(), c.clone()).unwrap();
            let got = solve_transport(&a, &b, &cost, p).unwrap().cost;
            let want = common::enumeration_ot(&a, &b, &c);
            assert!((got - want).abs() <= 1e-10, "p = {p}: {got} vs {want}");
        }
    }
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sinkhorn_never_undercuts_exact(a in weights(6), b in weights(9), c in prop::collection::vec(0.0f64..3.0, 54)) {
        let (mu, nu) = (ProbMeasure::normalized(a).unwrap(), ProbMeasure::normalized(b).unwrap());
        let cost = CostMatrix::new(6, 9, c).unwrap();
        let exact = solve_ot_exact(&mu, &nu, &cost).unwrap().cost;
        let smooth = sinkhorn(&mu, &nu, &cost, 0.05, 5000).unwrap().cost;
        prop_assert!(smooth >= exact - 1e-12);
    }

    #[test]
    fn distances_on_a_circle_are_metrics(a in weights(12), b in weights(12), c in weights(12)) {
        let s = circle(1.0, 12).unwrap();
        let m: Vec<ProbMeasure> = [a, b, c].into_iter().map(|w| ProbMeasure::normalized(w).unwrap()).collect();
        for f in [w1::<riccilab::FiniteMMSpace>, w2::<riccilab::FiniteMMSpace>] {
            let (ab, bc, ac) = (f(&s, &m[0], &m[1]).unwrap(), f(&s, &m[1], &m[2]).unwrap(), f(&s, &m[0], &m[2]).unwrap());
            prop_assert!(ac <= ab + bc + 1e-10);
            prop_assert!((f(&s, &m[1], &m[0]).unwrap() - ab).abs() <= 1e-10);
            prop_assert!(f(&s, &m[0], &m[0]).unwrap() <= 1e-10);
        }
        prop_assert!(w1(&s, &m[0], &m[1]).unwrap() <= w2(&s, &m[0], &m[1]).unwrap() + 1e-10);
    }
}
