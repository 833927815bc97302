//! First-passage constants of the tilted walks.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{EstimateWithCI, MeanAcc, RatioAcc};
use crate::model::{ModelError, ModelSpec, Regime};
use crate::replica::Plan;
use crate::walk::{estimate_C_R, TiltedWalk, WalkError};

#[derive(Debug, Error)]
pub enum ConstantsError {
    #[error("requested {requested:?} constants for a {actual:?} model")]
    RegimeMismatch { requested: Regime, actual: Regime },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

/// Monte Carlo constants.
///
/// Critical: `c_crit_prime = Q[e^{−ϱ*S_{τ₀⁻}}] − 1`, `c_crit = c_crit_prime/(E[ν] − 1)`,
/// `c_star = Q[e^{−ϱ*S} − 1]/Q[−ϱ*S]` (positions rescaled by ϱ*) and `C_R`.
/// Subcritical: `c_star_sub` under the ϱ−-tilt, `C_R` and `escape = Q(τ₀⁻ = ∞)`
/// under the ϱ+-tilt.
pub fn estimate_constants(
    model: &ModelSpec,
    regime: Regime,
    n_replicas: u64,
    max_steps: u64,
    plan: &Plan,
) -> Result<BTreeMap<String, EstimateWithCI>, ConstantsError> {
    let a = model.analyze()?;
    if a.regime != regime {
        return Err(ConstantsError::RegimeMismatch { requested: regime, actual: a.regime });
    }
    let plan = plan.sub("constants");
    let mut out = BTreeMap::new();
    match regime {
        Regime::Critical => {
            let rho = a.rho_star;
            let walk = TiltedWalk::new(model, rho)?;
            let (laplace, ratio, under, truncated) = undershoot_pass(&walk, rho, n_replicas, max_steps, &plan);
            let mut c_prime = EstimateWithCI::from_mean(&laplace, truncated);
            c_prime.value -= 1.0;
            let m1 = a.mean_offspring - 1.0;
            out.insert("c_crit".into(), c_prime.scale(1.0 / m1));
            out.insert("c_crit_prime".into(), c_prime);
            out.insert("c_star".into(), ratio.ratio(truncated));
            let under = EstimateWithCI::from_mean(&under, truncated);
            out.insert("C_R".into(), under.map(|m| 1.0 / m, |m| -1.0 / (m * m)));
            out.insert("undershoot_mean".into(), under);
        }
        Regime::Subcritical => {
            let rm = a.rho_minus.expect("subcritical roots");
            let rp = a.rho_plus.expect("subcritical roots");
            let minus = TiltedWalk::new(model, rm)?;
            let (_, ratio, _, truncated) = undershoot_pass(&minus, rm, n_replicas, max_steps, &plan.sub("minus"));
            out.insert("c_star_sub".into(), ratio.ratio(truncated));
            let plus = TiltedWalk::new(model, rp)?;
            let cr = estimate_C_R(&plus, n_replicas, 1.0, max_steps, &plan.sub("plus"))?;
            out.insert("C_R".into(), cr.c_r);
            out.insert("escape".into(), cr.base);
        }
        Regime::OutOfScope => unreachable!("analyze rejects out-of-scope models"),
    }
    Ok(out)
}

/// One pass of walks from 0 to `τ₀⁻`: `e^{−ϱS}`, the ratio
/// `(e^{−ϱS} − 1)/(−ϱS)` and `−S`.
fn undershoot_pass(
    walk: &TiltedWalk,
    rho: f64,
    n: u64,
    max_steps: u64,
    plan: &Plan,
) -> (MeanAcc, RatioAcc, MeanAcc, u64) {
    plan.fold(
        n,
        || (),
        || (MeanAcc::new(), RatioAcc::default(), MeanAcc::new(), 0u64),
        |(lap, ratio, under, tr), _, _, rng| {
            let p = walk.run_until_passage(0.0, None, Some(0.0), max_steps, rng);
            match p.undershoot() {
                Some(u) => {
                    let e = (rho * u).exp();
                    lap.push(e);
                    ratio.push(e - 1.0, rho * u);
                    under.push(u);
                }
                None => *tr += 1,
            }
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1.merge(&b.1);
            a.2.merge(&b.2);
            a.3 += b.3;
        },
    )
}
