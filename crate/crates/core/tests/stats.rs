use kbrw::brw::{YaglomDataset, YaglomSample};
use kbrw::dist::{CountLaw, DisplacementLaw};
use kbrw::model::{presets, Regime};
use kbrw::replica::Plan;
use kbrw::stats::*;

fn unit() -> DisplacementLaw {
    DisplacementLaw::Finite { values: vec![1.0], probs: vec![1.0] }
}

#[test]
fn lattice_critical_constants() {
    let m = presets::lattice_critical();
    let k = estimate_constants(&m, Regime::Critical, 20_000, 1_000_000, &Plan::serial(11)).unwrap();
    // the walk is simple symmetric, so S at the first passage below 0 is −1
    let e = 2.0 + 3f64.sqrt();
    let rho = e.ln();
    assert!((k["c_crit_prime"].value - (e - 1.0)).abs() < 1e-9);
    assert!((k["c_crit"].value - (e - 1.0)).abs() < 1e-9);
    assert!((k["c_star"].value - (e - 1.0) / rho).abs() < 1e-9);
    assert!((k["C_R"].value - 1.0).abs() < 1e-12);
    assert!(estimate_constants(&m, Regime::Subcritical, 10, 10, &Plan::serial(0)).is_err());
}

#[test]
fn two_point_escape_probability() {
    let m = presets::two_point_subcritical();
    let rho = m.analyze().unwrap().rho_plus.unwrap();
    let up = 0.05 * rho.exp();
    let q = up / (up + 0.95 * (-rho).exp());
    // gambler's ruin for the ±1 walk with up-probability q > 1/2
    let escape = 1.0 - (1.0 - q) / q;
    let k = estimate_constants(&m, Regime::Subcritical, 100_000, 100_000, &Plan::serial(12)).unwrap();
    assert!(k["escape"].within_se(escape, 4.0), "{:?} vs {escape}", k["escape"]);
    assert!(k.contains_key("c_star_sub") && k.contains_key("C_R"));
}

#[test]
fn single_pareto_tail_is_exact() {
    let t = [10.0, 30.0];
    let r = convolution_tail_check(
        &CountLaw::Deterministic { value: 1 },
        &unit(),
        2.0,
        1.5,
        200_000,
        &t,
        &Plan::serial(13),
    )
    .unwrap();
    assert!((r.limit - 1.5).abs() < 1e-12);
    for e in &r.scaled_tail {
        assert!(e.within_se(1.5, 4.0), "{e:?}");
    }
}

/// `P(Γ₁ + Γ₂ > t)` with `P(Γ > s) = s^{−p}` on `s ≥ 1`, by midpoint quadrature
/// in `u = 1/g` over the density of Γ₁.
fn two_pareto_tail(t: f64, p: f64) -> f64 {
    let tail = |s: f64| if s <= 1.0 { 1.0 } else { s.powf(-p) };
    // P(Γ₁ > t − 1) plus ∫_1^{t−1} P(Γ₂ > t − g) p g^{−p−1} dg
    let (a, b) = (1.0, t - 1.0);
    let n = 200_000;
    let h = (b - a) / n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let g = a + (i as f64 + 0.5) * h;
        s += tail(t - g) * p * g.powf(-p - 1.0) * h;
    }
    tail(b) + s
}

#[test]
fn two_pareto_sum_matches_quadrature() {
    let t = [5.0, 20.0];
    let r = convolution_tail_check(
        &CountLaw::Deterministic { value: 2 },
        &unit(),
        2.0,
        1.0,
        400_000,
        &t,
        &Plan::serial(14),
    )
    .unwrap();
    assert_eq!(r.limit, 2.0);
    for (e, t) in r.scaled_tail.iter().zip(t) {
        let want = two_pareto_tail(t, 2.0) * t * t;
        assert!(e.within_se(want, 4.0), "t={t}: {e:?} vs {want}");
    }
}

#[test]
fn convolution_rejects_bad_inputs() {
    let xi = CountLaw::Deterministic { value: 1 };
    let plan = Plan::serial(0);
    assert!(convolution_tail_check(&xi, &unit(), 0.5, 1.0, 10, &[2.0], &plan).is_err());
    let neg = DisplacementLaw::Finite { values: vec![-1.0, 1.0], probs: vec![0.5, 0.5] };
    assert!(convolution_tail_check(&xi, &neg, 2.0, 1.0, 10, &[2.0], &plan).is_err());
    let g = DisplacementLaw::Gaussian { mean: 1.0, sd: 1.0 };
    assert!(convolution_tail_check(&xi, &g, 2.0, 1.0, 10, &[2.0], &plan).is_err());
}

fn dataset(t: f64, shift: f64, p: f64) -> YaglomDataset {
    let samples = (0..200)
        .map(|i| {
            let o = (i as f64 + 0.5) / 200.0 + shift;
            YaglomSample { count: 1, mass: (0.5 * o).exp(), min_overshoot: o, overshoots: vec![o] }
        })
        .collect();
    YaglomDataset {
        x: 0.0,
        t,
        rho: 0.5,
        samples,
        survival: EstimateWithCI::new(p, 0.1 * p, 1000.0, 1000, 0),
        truncated: 0,
    }
}

#[test]
fn yaglom_identical_and_shifted() {
    let a = dataset(2.0, 0.0, 2e-2);
    let b = dataset(4.0, 0.0, 2e-2 * 0.5 * (-1.0f64).exp());
    let r = yaglom_diagnostic(&a, &b, true);
    assert_eq!(r.ks_min_overshoot.statistic, 0.0);
    assert!(r.ks_log_mass.p_value > 0.99);
    assert!((r.survival_ratio.value - 1.0).abs() < 1e-12);
    assert!((r.survival_ratio.stderr - 0.1 * 2f64.sqrt()).abs() < 1e-12);
    let c = dataset(4.0, 0.5, 1e-3);
    let r = yaglom_diagnostic(&a, &c, false);
    assert!(r.ks_min_overshoot.p_value < 1e-6);
    let want = 2e-2 * 1f64.exp() / (1e-3 * 2f64.exp());
    assert!((r.survival_ratio.value - want).abs() < 1e-9 * want);
}
