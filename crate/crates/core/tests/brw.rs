use kbrw::brw::*;
use kbrw::model::{presets, ModelKind, ModelSpec, PatternAtom};
use kbrw::replica::Plan;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs a tree whose every particle has displacements `points`.
fn fixed_tree(points: &[f64], x: f64, levels: &[f64], caps: Caps) -> (TreeRecord, ExplorationTrace) {
    let mut sim = KilledTreeSim::new();
    let opts = TreeOptions {
        levels: levels.to_vec(),
        record_overshoots: true,
        record_trace: true,
        caps,
        ..TreeOptions::default()
    };
    sim.run_with(x, &opts, |out| {
        out.clear();
        out.extend_from_slice(points);
    });
    (sim.record, sim.trace)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn root_with_two_killed_children() {
    let (rec, trace) = fixed_tree(&[-0.8, -0.8], 0.5, &[], Caps::default());
    assert_eq!(rec.total_progeny, 1);
    assert_eq!(rec.leaf_count, 2);
    assert_eq!(rec.exploration_y, 2);
    assert_eq!(trace.nu, vec![2]);
    assert_eq!(trace.alive, vec![0]);
    assert_eq!(exploration_check(&rec, &trace), ExplorationCheck::Holds);
}

#[test]
fn two_generation_tree() {
    // 0.5 -> {0.2, -0.1}; 0.2 -> {-0.1, -0.4}
    let (rec, trace) = fixed_tree(&[-0.3, -0.6], 0.5, &[], Caps::default());
    assert_eq!(rec.total_progeny, 2);
    assert_eq!(rec.leaf_count, 3);
    assert_eq!(rec.generations, 2);
    assert_eq!(trace.replay(), Some(3));
    assert_eq!(exploration_check(&rec, &trace), ExplorationCheck::Holds);
}

#[test]
fn mutated_trace_fails() {
    let (rec, trace) = fixed_tree(&[-0.3, -0.6], 0.5, &[], Caps::default());
    let mut bad = trace.clone();
    bad.nu[1] += 1;
    assert_eq!(exploration_check(&rec, &bad), ExplorationCheck::Fails);
    let mut bad = trace;
    bad.alive[0] = 2;
    assert_eq!(exploration_check(&rec, &bad), ExplorationCheck::Fails);
}

#[test]
fn runaway_tree_is_truncated() {
    let caps = Caps { max_particles: 1_000, max_generations: 50 };
    let (rec, trace) = fixed_tree(&[1.0, -100.0], 0.0, &[3.0, 10.0], caps);
    assert!(rec.truncated);
    assert_eq!(rec.generations, 50);
    assert_eq!(rec.h_levels, vec![1, 1]);
    assert_eq!(exploration_check(&rec, &trace), ExplorationCheck::Indeterminate);
    // the unexplored frontier is one particle
    assert_eq!(rec.exploration_y, rec.leaf_count as i64 + 1);
}

#[test]
fn level_crossings_and_z0l() {
    // 0.5 -> {1.5, 0.2}; 1.5 -> {2.5, 1.2}; 0.2 -> {1.2, -0.1}
    let caps = Caps { max_particles: 100, max_generations: 3 };
    let (rec, _) = fixed_tree(&[1.0, -0.3], 0.5, &[1.0, 2.2], caps);
    // generation 1: 1.5, 0.2; gen 2: 2.5, 1.2, 1.2, -0.1; gen 3 explores 2.5, 1.2, 1.2
    assert!(rec.truncated);
    assert_eq!(rec.h_levels[0], 2);
    assert_eq!(rec.overshoots[0].len(), rec.h_levels[0] as usize);
    assert!(rec.overshoots.iter().flatten().all(|o| *o > 0.0));
    assert_eq!(rec.z0l[0], 1);
}

#[test]
fn bad_levels_are_rejected() {
    let m = presets::two_point_subcritical();
    assert!(simulate_killed_tree(&m, 1.0, &[0.5], Caps::default(), &mut rng(0)).is_err());
    assert!(simulate_killed_tree(&m, 0.0, &[2.0, 1.0], Caps::default(), &mut rng(0)).is_err());
    assert!(simulate_killed_tree(&m, -1.0, &[], Caps::default(), &mut rng(0)).is_err());
}

#[test]
fn survey_independent_of_workers() {
    let m = presets::critical_gaussian();
    let fo = ForwardOptions { check_exploration: true, ..Default::default() };
    let run = |w| forward_survey(&m, 1.0, &[2.0, 4.0], 2000, Caps::default(), fo, &Plan::new(11, w)).unwrap().0;
    let a = run(1);
    let b = run(3);
    assert_eq!(a.mean_z.value.to_bits(), b.mean_z.value.to_bits());
    assert_eq!(a.survival[1].value.to_bits(), b.survival[1].value.to_bits());
    assert_eq!(a.exploration_fails, 0);
    assert_eq!(a.exploration_holds + a.truncated, 2000);
}

#[test]
fn martingale_means() {
    let m = presets::lean_critical_gaussian();
    let tilts = MartingaleTilts::for_model(&m).unwrap();
    let rho = tilts.rho;
    let x = 0.5;
    let plan = Plan::serial(5);
    let runs = plan.map(20_000, |_, r| martingale_trajectory(&m, x, 20, tilts, 1_000_000, r));
    for n in [1usize, 5, 20] {
        let mut w = kbrw::stats::MeanAcc::new();
        let mut dw = kbrw::stats::MeanAcc::new();
        for run in &runs {
            let s = run.get(n).copied().unwrap_or(MartingaleSample {
                generation: n as u64,
                additive_w: 0.0,
                derivative_dw: Some(0.0),
                m_rho_minus: None,
                population: 0,
                extinct: true,
                truncated: false,
            });
            assert!(!s.truncated);
            w.push(s.additive_w);
            dw.push(s.derivative_dw.unwrap());
        }
        let ew = (rho * x).exp();
        let edw = -rho * x * ew;
        assert!((w.mean() - ew).abs() < 4.0 * w.stderr(), "n={n} W {} vs {ew}", w.mean());
        assert!((dw.mean() - edw).abs() < 4.0 * dw.stderr(), "n={n} dW {} vs {edw}", dw.mean());
    }
}

#[test]
fn subcritical_martingale_pair() {
    let m = presets::two_point_subcritical();
    let tilts = MartingaleTilts::for_model(&m).unwrap();
    assert!(tilts.derivative_rho.is_none());
    let runs = Plan::serial(6).map(4000, |_, r| martingale_trajectory(&m, 0.0, 3, tilts, 1_000_000, r));
    let mut w = kbrw::stats::MeanAcc::new();
    let mut mm = kbrw::stats::MeanAcc::new();
    for run in &runs {
        let s = run.last().unwrap();
        assert_eq!(s.generation, 3);
        w.push(s.additive_w);
        mm.push(s.m_rho_minus.unwrap());
    }
    assert!((w.mean() - 1.0).abs() < 4.0 * w.stderr());
    assert!((mm.mean() - 1.0).abs() < 4.0 * mm.stderr());
}

#[test]
fn optional_line_needs_floor_mass() {
    let m = presets::critical_gaussian();
    let rho = m.analyze().unwrap().rho_star;
    let (x, t, floor) = (1.0, 3.0, -2.0);
    let (both, upper) = Plan::serial(9).fold(
        20_000,
        KilledTreeSim::new,
        || (kbrw::stats::MeanAcc::new(), kbrw::stats::MeanAcc::new()),
        |acc, sim, _, r| {
            let lm = optional_line_mass(&m, rho, x, t, floor, Caps::default(), sim, r);
            assert!(!lm.truncated);
            acc.0.push(lm.upper + lm.floor);
            acc.1.push(lm.upper);
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1.merge(&b.1);
        },
    );
    let target = (rho * x).exp();
    assert!((both.mean() - target).abs() < 4.0 * both.stderr(), "{} vs {target}", both.mean());
    assert!((upper.mean() - target).abs() > 4.0 * upper.stderr());
}

#[test]
fn yaglom_conditioning() {
    let m = presets::two_point_subcritical();
    let rho = m.analyze().unwrap().rho_plus.unwrap();
    let d = yaglom_samples(&m, 0.0, 2.0, rho, 20_000, Caps::default(), &Plan::serial(3)).unwrap();
    assert!(!d.samples.is_empty());
    for s in &d.samples {
        assert!(s.count >= 1);
        assert_eq!(s.count as usize, s.overshoots.len());
        assert!(s.min_overshoot > 0.0);
        assert!(s.mass >= s.count as f64);
    }
    let frac = d.samples.len() as f64 / 20_000.0;
    assert!((frac - d.survival.value).abs() < 1e-12);
    let none = yaglom_samples(&m, 0.0, 40.0, rho, 50, Caps::default(), &Plan::serial(3));
    assert!(matches!(none, Err(BrwError::NoConditioningEvents { .. })));
}

fn random_model() -> impl Strategy<Value = ModelSpec> {
    let atom = (0.05f64..1.0, prop::collection::vec(-3.0f64..1.0, 0..4));
    prop::collection::vec(atom, 1..4).prop_filter_map("mean offspring too large", |atoms| {
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        let atoms: Vec<PatternAtom> =
            atoms.into_iter().map(|(p, points)| PatternAtom { prob: p / total, points }).collect();
        let m = ModelSpec::new(ModelKind::General { atoms }).ok()?;
        (m.mean_offspring() <= 2.5).then_some(m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_invariants(m in random_model(), x in 0.0f64..2.0, seed in any::<u64>()) {
        let caps = Caps { max_particles: 20_000, max_generations: 200 };
        let levels = [x + 0.5, x + 1.0, x + 3.0];
        let (rec, trace) = simulate_killed_tree(&m, x, &levels, caps, &mut rng(seed)).unwrap();
        prop_assert!(rec.h_levels.windows(2).all(|w| w[0] > 0 || w[1] == 0));
        prop_assert!(rec.z0l.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rec.z0l.iter().all(|z| *z <= rec.leaf_count));
        prop_assert!(rec.max_position >= x);
        for (k, l) in levels.iter().enumerate() {
            if rec.max_position <= *l {
                prop_assert_eq!(rec.h_levels[k], 0);
            }
        }
        match exploration_check(&rec, &trace) {
            ExplorationCheck::Holds => prop_assert!(rec.complete()),
            ExplorationCheck::Fails => prop_assert!(false, "exploration identity failed"),
            ExplorationCheck::Indeterminate => {
                prop_assert!(rec.truncated || rec.stopped_at_top);
                prop_assert_eq!(rec.stopped_at_top, rec.h_levels[2] > 0);
                prop_assert!(rec.exploration_y >= rec.leaf_count as i64);
            }
        }
        if rec.complete() {
            prop_assert_eq!(rec.exploration_y, rec.leaf_count as i64);
            prop_assert_eq!(trace.nu.len() as u64, rec.total_progeny);
            if let Some(last) = rec.z0l.last() {
                // a complete tree that never crossed the top level loses all leaves below it
                if rec.h_levels[2] == 0 {
                    prop_assert_eq!(*last, rec.leaf_count);
                }
            }
        }
    }

    #[test]
    fn mutation_breaks_replay(m in random_model(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let caps = Caps { max_particles: 5_000, max_generations: 100 };
        let (rec, trace) = simulate_killed_tree(&m, 0.5, &[], caps, &mut rng(seed)).unwrap();
        prop_assume!(rec.complete());
        let mut bad = trace;
        let i = pick.index(bad.nu.len());
        bad.nu[i] += 1;
        prop_assert_eq!(exploration_check(&rec, &bad), ExplorationCheck::Fails);
    }
}
