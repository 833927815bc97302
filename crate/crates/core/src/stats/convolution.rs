//! Tails of random sums `Σ_{i ≤ ξ} Y_i Γ_i` with Pareto-type `Γ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EstimateWithCI, MeanAcc};
use crate::dist::{CountLaw, CountSampler, DisplacementLaw, DisplacementSampler};
use crate::replica::Plan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    pub p: f64,
    pub a: f64,
    /// `a E[Σ Y_iᵖ]`.
    pub limit: f64,
    pub t_grid: Vec<f64>,
    /// `tᵖ P̂(Σ Y_i Γ_i > t)` per grid point.
    pub scaled_tail: Vec<EstimateWithCI>,
    /// `scaled_tail / limit` at the largest `t`.
    pub final_ratio: f64,
}

/// `Γ` with `P(Γ > t) = a t^{−p}` for `t ≥ a^{1/p}`.
#[inline]
pub fn sample_pareto<R: Rng + ?Sized>(rng: &mut R, a: f64, p: f64) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    (a / u).powf(1.0 / p)
}

pub fn convolution_tail_check(
    xi: &CountLaw,
    y: &DisplacementLaw,
    p: f64,
    a: f64,
    n_replicas: u64,
    t_grid: &[f64],
    plan: &Plan,
) -> Result<ConvolutionReport, String> {
    if !(p >= 1.0 && a > 0.0) {
        return Err(format!("need p >= 1 and a > 0, got p = {p}, a = {a}"));
    }
    let atoms = y.atoms().ok_or("Y must have finite support")?;
    if atoms.iter().any(|(v, w)| *w > 0.0 && *v <= 0.0) {
        return Err("Y must be positive".into());
    }
    let limit = a * xi.mean() * atoms.iter().map(|(v, w)| w * v.powf(p)).sum::<f64>();
    let counts = CountSampler::new(xi);
    let ys = DisplacementSampler::new(y);
    let k = t_grid.len();
    let accs = plan.sub("convolution").fold(
        n_replicas,
        || (),
        || vec![MeanAcc::new(); k],
        |acc, _, _, rng| {
            let n = counts.sample(rng);
            let mut s = 0.0;
            for _ in 0..n {
                s += ys.sample(rng) * sample_pareto(rng, a, p);
            }
            for (j, t) in t_grid.iter().enumerate() {
                acc[j].push((s > *t) as u8 as f64);
            }
        },
        |x, y| {
            for (a, b) in x.iter_mut().zip(&y) {
                a.merge(b);
            }
        },
    );
    let scaled_tail: Vec<EstimateWithCI> =
        t_grid.iter().zip(&accs).map(|(t, acc)| EstimateWithCI::from_mean(acc, 0).scale(t.powf(p))).collect();
    let final_ratio = scaled_tail.last().map_or(f64::NAN, |e| e.value / limit);
    Ok(ConvolutionReport { p, a, limit, t_grid: t_grid.to_vec(), scaled_tail, final_ratio })
}
