//! Spinal decompositions: the size-biased reproduction along the spine,
//! many-to-one estimators and the importance-sampled survival estimator.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brw::{Caps, KilledTreeSim, TreeOptions};
use crate::dist::{AliasTable, CountLaw, CountSampler, DisplacementLaw, DisplacementSampler};
use crate::model::{ModelError, ModelKind, ModelSpec, Regime};
use crate::replica::Plan;
use crate::stats::{EstimateWithCI, MeanAcc, WeightAcc};
use crate::walk::{renewal_function, RenewalFn, RenewalMethod, StopReason, TiltedWalk, WalkError, DEFAULT_MAX_STEPS};

#[derive(Debug, Error)]
pub enum SpineError {
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model regime {0:?} has no mass-one tilt")]
    Regime(Regime),
    #[error("operation needs a finite-support model")]
    NotFinite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// How the spine's offspring count is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountBias {
    /// `P(ν̃ = k) = k P(ν = k) / E[ν]`.
    #[default]
    SizeBiased,
    /// Plain `ν`; a deliberately wrong sampler for negative controls.
    Unbiased,
}

#[derive(Debug, Clone)]
enum Palm {
    Iid {
        count: CountSampler,
        count_law: CountLaw,
        disp: DisplacementSampler,
        disp_law: DisplacementLaw,
    },
    General {
        table: AliasTable,
        /// `(pattern, spine index)` per table entry.
        choices: Vec<(usize, usize)>,
        patterns: Vec<Vec<f64>>,
    },
}

/// Reproduction of a spine particle under a mass-one tilt `ϱ`: the spine
/// child's displacement plus the displacements of its siblings.
#[derive(Debug, Clone)]
pub struct SpineSampler {
    walk: TiltedWalk,
    palm: Palm,
    bias: CountBias,
}

impl SpineSampler {
    pub fn new(model: &ModelSpec, rho: f64) -> Result<Self, SpineError> {
        Self::with_bias(model, rho, CountBias::SizeBiased)
    }

    pub fn with_bias(model: &ModelSpec, rho: f64, bias: CountBias) -> Result<Self, SpineError> {
        let walk = TiltedWalk::new(model, rho)?;
        let palm = match model.kind() {
            ModelKind::Iid { nu, x } => {
                let count_law = match bias {
                    CountBias::SizeBiased => nu.size_biased().ok_or_else(|| SpineError::Invalid("E[nu] = 0".into()))?,
                    CountBias::Unbiased => nu.clone(),
                };
                Palm::Iid {
                    count: CountSampler::new(&count_law),
                    count_law,
                    disp: DisplacementSampler::new(x),
                    disp_law: x.clone(),
                }
            }
            ModelKind::General { atoms } => {
                let mut weights = Vec::new();
                let mut choices = Vec::new();
                for (j, a) in atoms.iter().enumerate() {
                    for (i, v) in a.points.iter().enumerate() {
                        let w = match bias {
                            CountBias::SizeBiased => a.prob * (rho * v).exp(),
                            CountBias::Unbiased => a.prob * (rho * v).exp() / a.points.len() as f64,
                        };
                        if w > 0.0 {
                            weights.push(w);
                            choices.push((j, i));
                        }
                    }
                }
                Palm::General {
                    table: AliasTable::new(&weights).ok_or_else(|| SpineError::Invalid("no spine choices".into()))?,
                    choices,
                    patterns: atoms.iter().map(|a| a.points.clone()).collect(),
                }
            }
        };
        Ok(Self { walk, palm, bias })
    }

    pub fn walk(&self) -> &TiltedWalk {
        &self.walk
    }

    pub fn bias(&self) -> CountBias {
        self.bias
    }

    /// Draws the spine displacement and fills `siblings`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, siblings: &mut Vec<f64>) -> f64 {
        siblings.clear();
        match &self.palm {
            Palm::Iid { count, disp, .. } => {
                let k = count.sample(rng);
                let z = self.walk.step(rng);
                for _ in 1..k {
                    siblings.push(disp.sample(rng));
                }
                z
            }
            Palm::General { table, choices, patterns } => {
                let (j, i) = choices[table.sample(rng)];
                let p = &patterns[j];
                siblings.extend(p.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| *v));
                p[i]
            }
        }
    }

    /// Exact law of `(spine displacement, sorted siblings)` for finite
    /// support, as a map from bit patterns to probability.
    pub fn step_law(&self) -> Result<BTreeMap<Vec<u64>, f64>, SpineError> {
        let mut out = BTreeMap::new();
        match &self.palm {
            Palm::Iid { count_law, disp_law, .. } => {
                let disp = disp_law.atoms().ok_or(SpineError::NotFinite)?;
                let crate::walk::StepLaw::Atoms { values, probs } = self.walk.law() else {
                    return Err(SpineError::NotFinite);
                };
                for (k, pk) in count_law.pmf() {
                    if k == 0 {
                        continue;
                    }
                    for (z, pz) in values.iter().zip(probs) {
                        for_each_tuple(&disp, k as usize - 1, &mut |sibs, p| {
                            *out.entry(step_key(*z, sibs)).or_insert(0.0) += pk * pz * p;
                        });
                    }
                }
            }
            Palm::General { .. } => {
                return Err(SpineError::Invalid("general models are enumerated directly; use palm_law".into()))
            }
        }
        Ok(out)
    }
}

fn step_key(z: f64, sibs: &[f64]) -> Vec<u64> {
    let mut s = sibs.to_vec();
    s.sort_by(f64::total_cmp);
    let mut key = Vec::with_capacity(s.len() + 1);
    key.push(z.to_bits());
    key.extend(s.iter().map(|v| v.to_bits()));
    key
}

/// Calls `f(tuple, prob)` for every ordered tuple of length `k` over `atoms`.
fn for_each_tuple(atoms: &[(f64, f64)], k: usize, f: &mut dyn FnMut(&[f64], f64)) {
    let mut idx = vec![0usize; k];
    let mut buf = vec![0.0; k];
    loop {
        let mut p = 1.0;
        for (j, &i) in idx.iter().enumerate() {
            buf[j] = atoms[i].0;
            p *= atoms[i].1;
        }
        f(&buf, p);
        let mut pos = 0;
        while pos < k {
            idx[pos] += 1;
            if idx[pos] < atoms.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
        if pos == k {
            return;
        }
    }
}

/// The law of `(spine displacement, sorted siblings)` obtained by choosing a
/// child of the root with probability proportional to `e^{ϱV}` inside the
/// offspring pattern, weighted by `W₁`.
pub fn palm_law(model: &ModelSpec, rho: f64) -> Result<BTreeMap<Vec<u64>, f64>, SpineError> {
    let outcomes = model.outcomes().ok_or(SpineError::NotFinite)?;
    let psi = model.log_laplace(rho)?;
    let mut out = BTreeMap::new();
    let mut sibs = Vec::new();
    for (p, pattern) in outcomes {
        for (i, z) in pattern.iter().enumerate() {
            sibs.clear();
            sibs.extend(pattern.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| *v));
            *out.entry(step_key(*z, &sibs)).or_insert(0.0) += p * (rho * z - psi).exp();
        }
    }
    Ok(out)
}

/// One draw of the spine reproduction.
pub fn tilted_reproduction<R: Rng + ?Sized>(
    model: &ModelSpec,
    rho: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), SpineError> {
    let s = SpineSampler::new(model, rho)?;
    let mut sibs = Vec::new();
    let z = s.sample(rng, &mut sibs);
    Ok((z, sibs))
}

fn regime_rho(model: &ModelSpec) -> Result<f64, SpineError> {
    let a = model.analyze()?;
    a.regime_rho().ok_or(SpineError::Regime(a.regime))
}

/// `e^{ϱx} Q_x[e^{−ϱS_n} F(S_0..S_n)]`, an unbiased estimate of
/// `E_x[Σ_{|u|=n} F(V(u_0), …, V(u_n))]`.
pub fn many_to_one_estimate<F>(
    model: &ModelSpec,
    rho: f64,
    x: f64,
    n: usize,
    f: F,
    n_replicas: u64,
    plan: &Plan,
) -> Result<EstimateWithCI, SpineError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let walk = TiltedWalk::new(model, rho)?;
    let acc = plan.sub("many_to_one").fold(
        n_replicas,
        || Vec::with_capacity(n + 1),
        MeanAcc::new,
        |acc, path: &mut Vec<f64>, _, rng| {
            path.clear();
            path.push(x);
            let mut s = x;
            for _ in 0..n {
                s += walk.step(rng);
                path.push(s);
            }
            acc.push((rho * (x - s)).exp() * f(path));
        },
        |a, b| a.merge(&b),
    );
    Ok(EstimateWithCI::from_mean(&acc, 0))
}

/// `1{S_i ≥ 0 for all i}`, the killed-tree survival of a lineage.
pub fn alive_indicator(path: &[f64]) -> f64 {
    path.iter().all(|s| *s >= 0.0) as u8 as f64
}

/// `E_x[H(t)] = e^{ϱx} Q_x[e^{−ϱS_{τ_t⁺}}; τ_t⁺ < τ_0⁻]` from single walks
/// under the regime tilt.
pub fn estimate_eh(
    model: &ModelSpec,
    x: f64,
    t: f64,
    n_replicas: u64,
    plan: &Plan,
) -> Result<EstimateWithCI, SpineError> {
    if !(x >= 0.0) {
        return Err(SpineError::Invalid(format!("x = {x} must be >= 0")));
    }
    let rho = regime_rho(model)?;
    let walk = TiltedWalk::new(model, rho)?;
    let (acc, truncated) = plan.sub("eh").fold(
        n_replicas,
        || (),
        || (MeanAcc::new(), 0u64),
        |(acc, tr), _, _, rng| {
            let p = walk.run_until_passage(x, Some(t), Some(0.0), DEFAULT_MAX_STEPS, rng);
            match p.reason {
                StopReason::HitAbove(_) => acc.push((rho * (x - p.position)).exp()),
                StopReason::HitBelow(_) => acc.push(0.0),
                _ => *tr += 1,
            }
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1 += b.1;
        },
    );
    Ok(EstimateWithCI::from_mean(&acc, truncated))
}

/// Result of [`estimate_survival_spine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineSurvival {
    pub x: f64,
    pub t: f64,
    pub rho: f64,
    /// `P̂_x(H(t) > 0)`; `n_effective` is the importance-weight ESS.
    pub estimate: EstimateWithCI,
    pub effective_sample_size: f64,
    /// Replicas whose spine died before `t` (weight 0).
    pub spine_killed: u64,
    /// Replicas invalidated by a capped off-spine subtree or spine walk.
    pub flagged: u64,
}

#[derive(Default)]
struct SurvivalScratch {
    sim: KilledTreeSim,
    siblings: Vec<f64>,
}

struct SurvivalAcc {
    values: MeanAcc,
    weights: WeightAcc,
    killed: u64,
    flagged: u64,
}

/// Largest displacement a crosser can overshoot by, for renewal coverage.
fn overshoot_margin(model: &ModelSpec) -> f64 {
    match model.kind() {
        ModelKind::Iid { x: DisplacementLaw::Gaussian { mean, sd }, .. } => (mean + 8.0 * sd).max(0.0),
        _ => model
            .outcomes()
            .map(|o| o.iter().flat_map(|(_, p)| p.iter().copied()).fold(0.0f64, f64::max))
            .unwrap_or(0.0),
    }
}

/// Renewal function of the regime walk good enough for
/// [`estimate_survival_spine`] at level `t`: closed form when available,
/// otherwise a ladder-height table reaching `t` plus the overshoot margin.
pub fn survival_renewal(
    model: &ModelSpec,
    t: f64,
    n_replicas: u64,
    max_steps: u64,
    plan: &Plan,
) -> Result<RenewalFn, SpineError> {
    let rho = regime_rho(model)?;
    let walk = TiltedWalk::new(model, rho)?;
    if let Some(r) = RenewalFn::exact(&walk) {
        return Ok(r);
    }
    let reach = t + overshoot_margin(model) + 1.0;
    let k = (reach / 0.25).ceil() as usize;
    let grid: Vec<f64> = (0..=k).map(|i| i as f64 * 0.25).collect();
    let est = renewal_function(
        &walk,
        &grid,
        n_replicas,
        RenewalMethod::LadderDuality,
        max_steps,
        &plan.sub("survival_renewal"),
    )?;
    Ok(est.to_fn())
}

/// `P_x(H(t) > 0) = Q_x⁺[1/M*]` with `M* = (e^{−ϱx}/R(x)) Σ_{u∈𝓗(t)} R(V(u)) e^{ϱV(u)}`.
///
/// The `Q⁺` spine is the regime-tilted walk weighted by `R(S_τ)/R(x)` on
/// `{τ_t⁺ < τ_0⁻}`; siblings come from the Palm law and grow killed subtrees
/// stopped at `𝓗(t)`.
pub fn estimate_survival_spine(
    model: &ModelSpec,
    x: f64,
    t: f64,
    renewal: &RenewalFn,
    n_replicas: u64,
    caps: Caps,
    plan: &Plan,
) -> Result<SpineSurvival, SpineError> {
    if !(x >= 0.0 && x < t) {
        return Err(SpineError::Invalid(format!("need 0 <= x < t, got x = {x}, t = {t}")));
    }
    let needed = t + overshoot_margin(model);
    if renewal.covered() < needed {
        return Err(WalkError::RenewalRange { needed, covered: renewal.covered() }.into());
    }
    let rho = regime_rho(model)?;
    let spine = SpineSampler::new(model, rho)?;
    let opts =
        TreeOptions { levels: vec![t], stop_at_top: true, record_overshoots: true, caps, ..TreeOptions::default() };
    let r_x = renewal.eval(x);
    // mass of a crosser at v, measured relative to e^{ϱt}
    let mass = |v: f64| renewal.eval(v) * (rho * (v - t)).exp();
    let acc = plan.sub("survival_spine").fold(
        n_replicas,
        SurvivalScratch::default,
        || SurvivalAcc { values: MeanAcc::new(), weights: WeightAcc::default(), killed: 0, flagged: 0 },
        |acc, scratch, _, rng| {
            let mut s = x;
            let mut total = 0.0;
            let mut steps = 0u64;
            let mut capped = false;
            while s <= t {
                if steps >= DEFAULT_MAX_STEPS {
                    capped = true;
                    break;
                }
                let z = spine.sample(rng, &mut scratch.siblings);
                for &d in &scratch.siblings {
                    let v = s + d;
                    if v < 0.0 {
                        continue;
                    }
                    if v > t {
                        total += mass(v);
                        continue;
                    }
                    let rec = scratch.sim.run(model, v, &opts, rng);
                    if rec.truncated {
                        capped = true;
                    }
                    total += rec.overshoots[0].iter().map(|o| mass(t + o)).sum::<f64>();
                }
                s += z;
                steps += 1;
                if s < 0.0 {
                    break;
                }
            }
            if capped {
                acc.flagged += 1;
                return;
            }
            if s < 0.0 {
                acc.killed += 1;
                acc.values.push(0.0);
                acc.weights.push(0.0);
                return;
            }
            total += mass(s);
            let r_s = renewal.eval(s);
            acc.weights.push(r_s / r_x);
            acc.values.push(r_s * (rho * (x - t)).exp() / total);
        },
        |a, b| {
            a.values.merge(&b.values);
            a.weights.merge(&b.weights);
            a.killed += b.killed;
            a.flagged += b.flagged;
        },
    );
    let ess = acc.weights.effective_sample_size();
    let mut estimate = EstimateWithCI::from_mean(&acc.values, acc.flagged);
    estimate.n_effective = ess.min(acc.values.count() as f64);
    Ok(SpineSurvival {
        x,
        t,
        rho,
        estimate,
        effective_sample_size: ess,
        spine_killed: acc.killed,
        flagged: acc.flagged,
    })
}

/// Outcome of [`spine_marginal_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub depth: usize,
    /// Total variation between the `e^{ϱV}`-selected lineage law (with
    /// siblings) and the sampler's law, over `depth` generations.
    pub total_variation: f64,
    pub support: usize,
    pub bias: CountBias,
}

/// Exact comparison of the law of `(spine step, siblings)` over `n ≤ 3`
/// generations between the tree-side selection and the sampler.
pub fn spine_marginal_check(
    model: &ModelSpec,
    rho: f64,
    n: usize,
    bias: CountBias,
) -> Result<MarginalReport, SpineError> {
    if n > 3 {
        return Err(SpineError::Invalid(format!("depth {n} > 3")));
    }
    let tree = palm_law(model, rho)?;
    let sampler = match model.kind() {
        ModelKind::Iid { .. } => SpineSampler::with_bias(model, rho, bias)?.step_law()?,
        ModelKind::General { .. } => general_sampler_law(model, rho, bias)?,
    };
    let keys: Vec<&Vec<u64>> =
        tree.keys().chain(sampler.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let a: Vec<f64> = keys.iter().map(|k| tree.get(*k).copied().unwrap_or(0.0)).collect();
    let b: Vec<f64> = keys.iter().map(|k| sampler.get(*k).copied().unwrap_or(0.0)).collect();
    // product laws over n generations
    let m = keys.len();
    let mut tv = 0.0;
    let total = m.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let (mut pa, mut pb) = (1.0, 1.0);
        for _ in 0..n {
            pa *= a[c % m];
            pb *= b[c % m];
            c /= m;
        }
        tv += (pa - pb).abs();
    }
    Ok(MarginalReport { depth: n, total_variation: 0.5 * tv, support: if n == 0 { 1 } else { total }, bias })
}

fn general_sampler_law(model: &ModelSpec, rho: f64, bias: CountBias) -> Result<BTreeMap<Vec<u64>, f64>, SpineError> {
    let s = SpineSampler::with_bias(model, rho, bias)?;
    let Palm::General { table: _, choices, patterns } = &s.palm else {
        unreachable!("general model");
    };
    let ModelKind::General { atoms } = model.kind() else {
        unreachable!("general model");
    };
    let mut weights = Vec::with_capacity(choices.len());
    for &(j, i) in choices {
        let v = patterns[j][i];
        let w = match bias {
            CountBias::SizeBiased => atoms[j].prob * (rho * v).exp(),
            CountBias::Unbiased => atoms[j].prob * (rho * v).exp() / patterns[j].len() as f64,
        };
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    let mut out = BTreeMap::new();
    let mut sibs = Vec::new();
    for (&(j, i), w) in choices.iter().zip(weights) {
        sibs.clear();
        sibs.extend(patterns[j].iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| *v));
        *out.entry(step_key(patterns[j][i], &sibs)).or_insert(0.0) += w / total;
    }
    Ok(out)
}
