use kbrw::model::{presets, ModelKind, ModelSpec, PatternAtom};
use kbrw::oracle::*;
use kbrw::walk::TiltedWalk;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn binary_tree_counts() {
    let m = presets::lattice_critical();
    for n in 0..=4 {
        let v = enumerate_tree_expectation(&m, 0.0, TreeFunctional::Count { n }).unwrap();
        assert!(close(v, 2f64.powi(n as i32), 1e-12), "n={n}: {v}");
    }
}

#[test]
fn additive_martingale_is_exact() {
    for (m, x) in [
        (presets::lattice_critical(), 0.0),
        (presets::lattice_critical(), 2.0),
        (presets::two_point_subcritical(), 1.0),
    ] {
        let a = m.analyze().unwrap();
        let rhos: Vec<f64> = [a.regime_rho(), a.rho_minus].into_iter().flatten().collect();
        for rho in rhos {
            for n in 1..=3 {
                let w = enumerate_tree_expectation(&m, x, TreeFunctional::Additive { n, rho }).unwrap();
                assert!(close(w, (rho * x).exp(), 1e-9), "rho={rho} n={n}: {w}");
            }
        }
    }
}

#[test]
fn derivative_martingale_is_exact() {
    let m = presets::lattice_critical();
    let rho = m.analyze().unwrap().rho_star;
    for x in [0.0, 1.0, 3.0] {
        let dw = enumerate_tree_expectation(&m, x, TreeFunctional::Derivative { n: 3, rho }).unwrap();
        let want = -rho * x * (rho * x).exp();
        assert!((dw - want).abs() < 1e-9 * want.abs().max(1.0), "x={x}: {dw} vs {want}");
    }
}

#[test]
fn alive_count_by_hand() {
    // model C from x=1, two generations: lineages (+1,±1) and (−1,+1) survive
    let m = presets::lattice_critical();
    let q = (2.0 - 3f64.sqrt()) / 4.0;
    let want = 4.0 * (q + (1.0 - q) * q);
    let v = enumerate_tree_expectation(&m, 1.0, TreeFunctional::AliveCount { n: 2 }).unwrap();
    assert!(close(v, want, 1e-12), "{v} vs {want}");
}

#[test]
fn general_model_patterns() {
    let m = ModelSpec::new(ModelKind::General {
        atoms: vec![
            PatternAtom { prob: 0.5, points: vec![1.0, -1.0, -1.0] },
            PatternAtom { prob: 0.5, points: vec![-2.0, 1.0] },
        ],
    })
    .unwrap();
    let c1 = enumerate_tree_expectation(&m, 0.0, TreeFunctional::Count { n: 1 }).unwrap();
    assert!(close(c1, 2.5, 1e-12));
    let c2 = enumerate_tree_expectation(&m, 0.0, TreeFunctional::Count { n: 2 }).unwrap();
    assert!(close(c2, 6.25, 1e-12));
    // from 0 the generation-one leaves are the −1, −1, −2 children
    let l1 = enumerate_tree_expectation(&m, 0.0, TreeFunctional::Leaves { depth: 1 }).unwrap();
    assert!(close(l1, 0.5 * 2.0 + 0.5, 1e-12));
}

#[test]
fn crossings_at_depth_one() {
    let m = presets::lattice_critical();
    let q = (2.0 - 3f64.sqrt()) / 4.0;
    let v = enumerate_tree_expectation(&m, 0.0, TreeFunctional::Crossings { level: 0.5, depth: 1 }).unwrap();
    assert!(close(v, 2.0 * q, 1e-12));
}

#[test]
fn budget_error_reports_feasible_depth() {
    let m = presets::lattice_critical();
    let r = enumerate_tree_with_budget(&m, 0.0, &[TreeFunctional::Count { n: 9 }], 1_000_000);
    match r {
        Err(OracleError::Budget { feasible, .. }) => assert_eq!(feasible, 6),
        other => panic!("{other:?}"),
    }
    let g = presets::critical_gaussian();
    assert!(matches!(enumerate_tree_expectation(&g, 0.0, TreeFunctional::Count { n: 1 }), Err(OracleError::NotFinite)));
}

#[test]
fn ssrw_gamblers_ruin() {
    let m = presets::lattice_critical();
    let walk = TiltedWalk::new(&m, m.analyze().unwrap().rho_star).unwrap();
    for t in [1.0, 5.0, 50.0] {
        let v = enumerate_walk_functional(&walk, 0.0, WalkFunctional::Passage { t }).unwrap();
        assert!(close(v.value, 1.0 / (t + 2.0), 1e-10), "t={t}: {}", v.value);
    }
    let v = enumerate_walk_functional(&walk, 3.0, WalkFunctional::Passage { t: 10.0 }).unwrap();
    assert!(close(v.value, 4.0 / 12.0, 1e-10));
}

#[test]
fn ssrw_undershoot_is_one() {
    let m = presets::lattice_critical();
    let rho = m.analyze().unwrap().rho_star;
    let walk = TiltedWalk::new(&m, rho).unwrap();
    let v =
        enumerate_walk_functional(&walk, 0.0, WalkFunctional::UndershootLaplace { s: rho, cutoff: 2000.0 }).unwrap();
    // the walk leaves above 2000 with probability 1/2002
    assert!((v.value - rho.exp()).abs() <= v.error_bound + 1e-9, "{v:?}");
    assert!(v.error_bound < 3e-3);
    let mean = enumerate_walk_functional(&walk, 0.0, WalkFunctional::UndershootMean { cutoff: 2000.0 }).unwrap();
    assert!((mean.value - 1.0).abs() <= mean.error_bound + 1e-9);
}

#[test]
fn two_point_escape_probability() {
    let m = presets::two_point_subcritical();
    let walk = TiltedWalk::new(&m, m.analyze().unwrap().rho_plus.unwrap()).unwrap();
    let v = enumerate_walk_functional(&walk, 0.0, WalkFunctional::Escape { cutoff: 200.0 }).unwrap();
    // q = P(up) under the tilt; escape from 0 is 1 − (1 − q)/q
    let q = 0.05 * (2.008146f64).exp() / (0.05 * 2.008146f64.exp() + 0.95 * (-2.008146f64).exp());
    let want = 1.0 - (1.0 - q) / q;
    assert!((v.value - want).abs() < 1e-5, "{} vs {want}", v.value);
    assert!((v.value - 0.657626).abs() < 5e-6);
    assert!(v.error_bound < 1e-6);
}

#[test]
fn stay_nonnegative_matches_ballot_counts() {
    let m = presets::lattice_critical();
    let walk = TiltedWalk::new(&m, m.analyze().unwrap().rho_star).unwrap();
    // P(S_1..S_n ≥ 0) for SSRW: C(n, ⌊n/2⌋) / 2^n
    for (n, c) in [(1usize, 1.0), (2, 2.0), (3, 3.0), (4, 6.0), (6, 20.0)] {
        let v = enumerate_walk_functional(&walk, 0.0, WalkFunctional::StayNonnegative { horizon: n }).unwrap();
        assert!(close(v.value, c / 2f64.powi(n as i32), 1e-12), "n={n}");
    }
}

#[test]
fn gaussian_walk_is_rejected() {
    let m = presets::critical_gaussian();
    let walk = TiltedWalk::new(&m, m.analyze().unwrap().rho_star).unwrap();
    assert!(matches!(
        enumerate_walk_functional(&walk, 0.0, WalkFunctional::Passage { t: 1.0 }),
        Err(OracleError::NonLattice)
    ));
}
