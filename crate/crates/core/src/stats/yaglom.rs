//! Comparison of conditioned overshoot data at two levels.

use serde::{Deserialize, Serialize};

use super::{ks_two_sample, EstimateWithCI, KsResult};
use crate::brw::YaglomDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YaglomReport {
    pub t1: f64,
    pub t2: f64,
    pub ks_min_overshoot: KsResult,
    pub ks_log_mass: KsResult,
    pub survival_ratio: EstimateWithCI,
}

/// `[𝓡(t₁)e^{ϱt₁}P₁] / [𝓡(t₂)e^{ϱt₂}P₂]` with `𝓡(t) = t` when critical and
/// 1 otherwise; the two estimates are independent.
pub fn survival_ratio(
    t1: f64,
    p1: &EstimateWithCI,
    t2: f64,
    p2: &EstimateWithCI,
    rho: f64,
    critical: bool,
) -> EstimateWithCI {
    let scale = |t: f64| if critical { t } else { 1.0 } * (rho * t).exp();
    let a = p1.value * scale(t1);
    let b = p2.value * scale(t2);
    let value = a / b;
    let rel = ((p1.stderr / p1.value).powi(2) + (p2.stderr / p2.value).powi(2)).sqrt();
    EstimateWithCI::new(
        value,
        value * rel,
        p1.n_effective.min(p2.n_effective),
        p1.replicas + p2.replicas,
        p1.truncated + p2.truncated,
    )
}

pub fn yaglom_diagnostic(a: &YaglomDataset, b: &YaglomDataset, critical: bool) -> YaglomReport {
    let min_a: Vec<f64> = a.samples.iter().map(|s| s.min_overshoot).collect();
    let min_b: Vec<f64> = b.samples.iter().map(|s| s.min_overshoot).collect();
    let mass_a: Vec<f64> = a.samples.iter().map(|s| s.mass.ln()).collect();
    let mass_b: Vec<f64> = b.samples.iter().map(|s| s.mass.ln()).collect();
    YaglomReport {
        t1: a.t,
        t2: b.t,
        ks_min_overshoot: ks_two_sample(&min_a, &min_b),
        ks_log_mass: ks_two_sample(&mass_a, &mass_b),
        survival_ratio: survival_ratio(a.t, &a.survival, b.t, &b.survival, a.rho, critical),
    }
}
