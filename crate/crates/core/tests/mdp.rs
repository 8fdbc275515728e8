mod common;

use common::*;
use maxplus_vi::mdp::{neighborhood_degree, DeterministicMdp};
use maxplus_vi::{Error, Grid};
use proptest::prelude::*;
use rand::Rng;

/// Exact-in-the-limit evaluation of a fixed policy by iterating its linear operator.
fn evaluate_policy(edges: &Edges, gamma: f64, successor: &[usize]) -> Vec<f64> {
    let reward: Vec<f64> = successor
        .iter()
        .enumerate()
        .map(|(s, &t)| edges[s].iter().find(|e| e.0 == t).unwrap().1)
        .collect();
    let mut v = vec![0.0; successor.len()];
    for _ in 0..3000 {
        v = (0..v.len()).map(|s| reward[s] + gamma * v[successor[s]]).collect();
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn compiled_power_is_iterated_bellman(seed in any::<u64>(), rho in 1usize..10) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=40);
        let (mdp, edges) = random_mdp(&mut r, n);
        let power = mdp.compile_power(rho).unwrap();
        prop_assert!((power.gamma() - mdp.gamma().powi(rho as i32)).abs() < 1e-15);
        for _ in 0..3 {
            let v = random_vector(&mut r, n);
            let got = raw(power.bellman_apply(&values(&v)).unwrap().as_slice());
            let expect = bellman_power(&edges, mdp.gamma(), &v, rho);
            prop_assert!(sup_dist(&got, &expect) < 1e-10);
        }
    }

    #[test]
    fn value_iteration_certificate(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=30);
        let (mdp, edges) = random_mdp(&mut r, n);
        let g = mdp.gamma();
        let tol = 1e-8;
        let out = mdp.value_iteration(&values(&vec![0.0; n]), tol, 100_000).unwrap();
        prop_assert!(out.residual <= tol);
        prop_assert_eq!(out.residuals.len(), out.iterations + 1);
        let policy = mdp.greedy_policy(&out.values).unwrap();
        prop_assert!(policy.is_valid_for(&mdp));
        let v_pi = evaluate_policy(&edges, g, &policy.successor);
        // the greedy policy of a near-optimal V is optimal, so V_π is the fixed point
        prop_assert!(sup_dist(&bellman(&edges, g, &v_pi), &v_pi) < 1e-9);
        prop_assert!(sup_dist(&raw(out.values.as_slice()), &v_pi) <= tol / (1.0 - g) + 1e-9);
    }

    #[test]
    fn text_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=20);
        let (mdp, _) = random_mdp(&mut r, n);
        let back = DeterministicMdp::<f64>::from_text(&mdp.to_text()).unwrap();
        prop_assert_eq!(back.content_hash(), mdp.content_hash());
        prop_assert_eq!(back.edges().collect::<Vec<_>>(), mdp.edges().collect::<Vec<_>>());
    }
}

#[test]
fn degree_matches_lattice_count() {
    for rho in 0..=6u32 {
        for d in 0..=6u32 {
            assert_eq!(neighborhood_degree(rho, d), lattice_ball(rho as i64, d), "rho={rho} d={d}");
        }
    }
    for rho in 0..=12 {
        for d in 0..=12 {
            assert_eq!(neighborhood_degree(rho, d), neighborhood_degree(d, rho));
        }
    }
}

#[test]
fn chain_power_reaches_rho_neighbors() {
    let n = 20;
    let edges = (0..n).flat_map(|s: usize| {
        let mut e = vec![(s, s, 0.0)];
        if s > 0 {
            e.push((s, s - 1, 0.0));
        }
        if s + 1 < n {
            e.push((s, s + 1, 0.0));
        }
        e
    });
    let mdp = DeterministicMdp::new(n, 0.9, edges).unwrap();
    let p = mdp.compile_power(3).unwrap();
    let (ts, _) = p.successors(10);
    assert_eq!(ts, &[7, 8, 9, 10, 11, 12, 13]);
    assert_eq!(ts.len() as u128, neighborhood_degree(3, 1));
}

#[test]
fn construction_errors() {
    assert!(matches!(
        DeterministicMdp::new(2, 1.0, [(0, 1, 0.0), (1, 0, 0.0)]),
        Err(Error::InvalidDiscount(_))
    ));
    assert!(matches!(
        DeterministicMdp::new(2, 0.5, [(0, 1, 0.0)]),
        Err(Error::NoOutgoingEdge { state: 1 })
    ));
    assert!(matches!(
        DeterministicMdp::new(2, 0.5, [(0, 2, 0.0), (1, 0, 0.0)]),
        Err(Error::StateOutOfRange { .. })
    ));
    assert!(matches!(
        DeterministicMdp::new(1, 0.5, [(0, 0, f64::NAN)]),
        Err(Error::NonAdmissible(_))
    ));
    let mdp = DeterministicMdp::new(1, 0.5, [(0, 0, 1.0)]).unwrap();
    assert!(mdp.compile_power(0).is_err());
    assert!(mdp.value_iteration(&values(&[0.0]), 0.0, 10).is_err());
    assert!(mdp.with_grid(std::sync::Arc::new(Grid::line(3).unwrap())).is_err());
}

#[test]
fn non_convergence_reports_last_iterate() {
    let mdp = DeterministicMdp::new(1, 0.99, [(0, 0, 1.0)]).unwrap();
    match mdp.value_iteration(&values(&[0.0]), 1e-12, 5) {
        Err(Error::NotConverged { iterations, last_iterate, .. }) => {
            assert_eq!(iterations, 5);
            assert_eq!(last_iterate.len(), 1);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn parallel_edges_keep_the_best_reward() {
    let mdp = DeterministicMdp::new(1, 0.5, [(0, 0, 1.0), (0, 0, 3.0)]).unwrap();
    assert_eq!(mdp.reward(0, 0), Some(3.0));
    assert_eq!(mdp.edge_count(), 1);
}
