//! The spine random walk under an exponential tilt of the intensity measure.
//!
//! Covers first passages, ladder structure, the renewal function `R`, the
//! constant `C_R`, Tanaka's construction of the walk conditioned to stay
//! positive, its size-biased variant `Ŝ` and the Doob `R`-transform step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{kahan_sum, DisplacementSampler};
use crate::model::{Intensity, ModelError, ModelSpec};
use crate::replica::Plan;
use crate::stats::{isotonic_increasing, EstimateWithCI, MeanAcc};

pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;
/// Largest |ψ(ϱ)| accepted for a probability tilt.
pub const MASS_TOL: f64 = 1e-8;
/// Drift below which a walk is treated as centered.
pub const DRIFT_TOL: f64 = 1e-9;
/// `e^{−θc}` escape bound used to stop positive-drift walks.
const ESCAPE_LOG_BOUND: f64 = 40.0;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("psi({rho}) = {psi} is not zero; the tilt is not a probability law")]
    NotMassOne { rho: f64, psi: f64 },
    #[error("walk drift {0} is negative; ladder times may be infinite")]
    NegativeDrift(f64),
    #[error("renewal table covers [0, {covered}] but [0, {needed}] is required")]
    RenewalRange { needed: f64, covered: f64 },
    #[error("renewal normalizer {value} <= 0 at y = {y}")]
    Normalizer { value: f64, y: f64 },
    #[error("operation needs a lattice step law")]
    NonLattice,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step distribution of a tilted walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepLaw {
    Atoms { values: Vec<f64>, probs: Vec<f64> },
    Gaussian { mean: f64, sd: f64 },
}

impl StepLaw {
    pub fn mean(&self) -> f64 {
        match self {
            StepLaw::Atoms { values, probs } => kahan_sum(values.iter().zip(probs).map(|(v, p)| v * p)),
            StepLaw::Gaussian { mean, .. } => *mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            StepLaw::Atoms { values, probs } => {
                let m = self.mean();
                kahan_sum(values.iter().zip(probs).map(|(v, p)| p * (v - m).powi(2)))
            }
            StepLaw::Gaussian { sd, .. } => sd * sd,
        }
    }

    /// Probability of `value` for finite laws.
    pub fn pmf(&self, value: f64) -> f64 {
        match self {
            StepLaw::Atoms { values, probs } => {
                values.iter().zip(probs).filter(|(v, _)| **v == value).map(|(_, p)| *p).sum()
            }
            StepLaw::Gaussian { .. } => 0.0,
        }
    }

    /// log E[e^{sX}].
    pub fn log_mgf(&self, s: f64) -> f64 {
        match self {
            StepLaw::Atoms { values, probs } => {
                crate::dist::log_sum_exp(values.iter().zip(probs).map(|(v, p)| p.ln() + s * v))
            }
            StepLaw::Gaussian { mean, sd } => s * mean + 0.5 * sd * sd * s * s,
        }
    }
}

/// The walk with step law `e^{ϱz}·E[𝓛(dz)]`.
#[derive(Debug, Clone)]
pub struct TiltedWalk {
    rho: f64,
    law: StepLaw,
    sampler: DisplacementSampler,
    drift: f64,
    psi: f64,
    span: Option<f64>,
}

pub fn make_tilted_walk(model: &ModelSpec, rho: f64) -> Result<TiltedWalk, WalkError> {
    TiltedWalk::new(model, rho)
}

impl TiltedWalk {
    pub fn new(model: &ModelSpec, rho: f64) -> Result<Self, WalkError> {
        let psi = model.log_laplace(rho)?;
        if !(psi.abs() <= MASS_TOL) {
            return Err(WalkError::NotMassOne { rho, psi });
        }
        let law = match model.intensity() {
            Intensity::Atoms(atoms) => {
                let raw: Vec<f64> = atoms.iter().map(|(v, w)| w.ln() + rho * v - psi).map(f64::exp).collect();
                let total = kahan_sum(raw.iter().copied());
                StepLaw::Atoms {
                    values: atoms.iter().map(|a| a.0).collect(),
                    probs: raw.iter().map(|p| p / total).collect(),
                }
            }
            Intensity::Gaussian { mean, sd, .. } => StepLaw::Gaussian { mean: mean + sd * sd * rho, sd: *sd },
        };
        Ok(Self::from_law(law, rho, psi, model.lattice_span()))
    }

    /// A walk with an explicit step law, outside any model.
    pub fn from_step_law(law: StepLaw) -> Self {
        let span = match &law {
            StepLaw::Atoms { values, .. } => span_of(values),
            StepLaw::Gaussian { .. } => None,
        };
        Self::from_law(law, 0.0, 0.0, span)
    }

    fn from_law(law: StepLaw, rho: f64, psi: f64, span: Option<f64>) -> Self {
        let sampler = match &law {
            StepLaw::Atoms { values, probs } if values.len() == 2 => {
                DisplacementSampler::TwoPoint { up: values[1], down: values[0], p_up: probs[1] }
            }
            StepLaw::Atoms { values, probs } => {
                let atoms: Vec<(f64, f64)> = values.iter().copied().zip(probs.iter().copied()).collect();
                DisplacementSampler::from_atoms(&atoms)
            }
            StepLaw::Gaussian { mean, sd } => DisplacementSampler::Gaussian { mean: *mean, sd: *sd },
        };
        let drift = law.mean();
        Self { rho, law, sampler, drift, psi, span }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn law(&self) -> &StepLaw {
        &self.law
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    /// ψ(ϱ); the step law's total mass before normalization is `e^{ψ(ϱ)}`.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn is_centered(&self) -> bool {
        self.drift.abs() <= DRIFT_TOL
    }

    /// `Some(h)` when every step is a multiple of `h`.
    pub fn lattice_span(&self) -> Option<f64> {
        self.span
    }

    pub fn variance(&self) -> f64 {
        self.law.variance()
    }

    /// θ > 0 with E[e^{−θX}] = 1, for positive drift.
    pub fn lundberg_exponent(&self) -> Option<f64> {
        if self.drift <= DRIFT_TOL {
            return None;
        }
        match &self.law {
            StepLaw::Gaussian { mean, sd } => Some(2.0 * mean / (sd * sd)),
            StepLaw::Atoms { values, .. } => {
                if values.iter().all(|v| *v >= 0.0) {
                    return Some(f64::INFINITY);
                }
                let f = |th: f64| self.law.log_mgf(-th);
                let mut hi = 1.0;
                while f(hi) <= 0.0 {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    // f is negative on (0, θ) and positive beyond
                    if f(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(0.5 * (lo + hi))
            }
        }
    }

    /// Height above the running minimum after which return below it has
    /// probability at most `e^{−40}`.
    pub fn escape_height(&self) -> Option<f64> {
        self.lundberg_exponent().map(|th| ESCAPE_LOG_BOUND / th)
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sampler.sample(rng)
    }

    /// Runs from `x` until `S > upper`, `S < lower` or `max_steps`, without
    /// storing the path.
    #[inline]
    pub fn run_until_passage<R: Rng + ?Sized>(
        &self,
        x: f64,
        upper: Option<f64>,
        lower: Option<f64>,
        max_steps: u64,
        rng: &mut R,
    ) -> Passage {
        let up = upper.unwrap_or(f64::INFINITY);
        let lo = lower.unwrap_or(f64::NEG_INFINITY);
        let mut s = x;
        let mut k = 0u64;
        loop {
            if s > up {
                return Passage { steps: k, position: s, reason: StopReason::HitAbove(up) };
            }
            if s < lo {
                return Passage { steps: k, position: s, reason: StopReason::HitBelow(lo) };
            }
            if k >= max_steps {
                return Passage { steps: k, position: s, reason: StopReason::MaxSteps };
            }
            s += self.step(rng);
            k += 1;
        }
    }
}

fn span_of(values: &[f64]) -> Option<f64> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut h = 0.0f64;
    for v in values {
        let (mut a, mut b) = (h.max(v.abs()), h.min(v.abs()));
        while b > 1e-9 * scale {
            let r = a % b;
            a = b;
            b = r.min(b - r);
        }
        h = a;
    }
    (h > 1e-6 * scale && values.iter().all(|v| ((v / h) - (v / h).round()).abs() < 1e-8)).then_some(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum StopReason {
    HitAbove(f64),
    HitBelow(f64),
    MaxSteps,
    Horizon,
}

/// End state of an unstored passage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Passage {
    pub steps: u64,
    pub position: f64,
    pub reason: StopReason,
}

impl Passage {
    /// `S_τ − t` after crossing `t` from below.
    pub fn overshoot(&self) -> Option<f64> {
        match self.reason {
            StopReason::HitAbove(t) => Some(self.position - t),
            _ => None,
        }
    }

    /// `a − S_τ` after crossing `a` from above.
    pub fn undershoot(&self) -> Option<f64> {
        match self.reason {
            StopReason::HitBelow(a) => Some(a - self.position),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub start: f64,
    pub increments: Vec<f64>,
    pub stop: StopReason,
}

impl WalkPath {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// `S_0, …, S_n` by running sums.
    pub fn positions(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        let mut s = self.start;
        out.push(s);
        for x in &self.increments {
            s += x;
            out.push(s);
        }
        out
    }

    pub fn end(&self) -> f64 {
        self.start + self.increments.iter().sum::<f64>()
    }

    pub fn overshoot(&self) -> Option<f64> {
        match self.stop {
            StopReason::HitAbove(t) => Some(self.end() - t),
            _ => None,
        }
    }

    pub fn undershoot(&self) -> Option<f64> {
        match self.stop {
            StopReason::HitBelow(a) => Some(a - self.end()),
            _ => None,
        }
    }

    /// First index with `S_k > a`.
    pub fn tau_above(&self, a: f64) -> Option<usize> {
        self.positions().iter().position(|s| *s > a)
    }

    /// First index with `S_k < a`.
    pub fn tau_below(&self, a: f64) -> Option<usize> {
        self.positions().iter().position(|s| *s < a)
    }
}

/// Stored path from `x` to the first strict crossing of a barrier.
pub fn simulate_until_passage<R: Rng + ?Sized>(
    walk: &TiltedWalk,
    x: f64,
    upper: Option<f64>,
    lower: Option<f64>,
    max_steps: u64,
    rng: &mut R,
) -> WalkPath {
    let up = upper.unwrap_or(f64::INFINITY);
    let lo = lower.unwrap_or(f64::NEG_INFINITY);
    let mut increments = Vec::new();
    let mut s = x;
    let stop = loop {
        if s > up {
            break StopReason::HitAbove(up);
        }
        if s < lo {
            break StopReason::HitBelow(lo);
        }
        if increments.len() as u64 >= max_steps {
            break StopReason::MaxSteps;
        }
        let d = walk.step(rng);
        increments.push(d);
        s += d;
    };
    WalkPath { start: x, increments, stop }
}

/// Strict ladder epochs and heights, both measured from the start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderDecomposition {
    /// `(σ_n, H_n)` with `H_n = S_{σ_n} − S_0`.
    pub epochs: Vec<(usize, f64)>,
    /// `(σ⁻_n, H⁻_n)` with `H⁻_n = S_0 − S_{σ⁻_n}`.
    pub descending_epochs: Vec<(usize, f64)>,
}

pub fn ladder_decompose(path: &WalkPath) -> LadderDecomposition {
    let mut epochs = Vec::new();
    let mut descending_epochs = Vec::new();
    let (mut hi, mut lo) = (path.start, path.start);
    let mut s = path.start;
    for (i, x) in path.increments.iter().enumerate() {
        s += x;
        if s > hi {
            hi = s;
            epochs.push((i + 1, s - path.start));
        }
        if s < lo {
            lo = s;
            descending_epochs.push((i + 1, path.start - s));
        }
    }
    LadderDecomposition { epochs, descending_epochs }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenewalMethod {
    VisitCount,
    LadderDuality,
}

/// Monte Carlo renewal function on a grid of `x ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalEstimate {
    pub x_grid: Vec<f64>,
    pub r_values: Vec<EstimateWithCI>,
    /// Isotonic (nondecreasing) cleanup of the raw means.
    pub monotone: Vec<f64>,
    /// Grid points where the raw means decreased.
    pub monotone_violations: usize,
    pub method: RenewalMethod,
}

impl RenewalEstimate {
    pub fn to_fn(&self) -> RenewalFn {
        RenewalFn::from_table(&self.x_grid, &self.monotone)
    }
}

/// A renewal function usable as an `h`-transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RenewalFn {
    /// `Σ_{n ≤ ⌊x/h⌋} rⁿ`, exact for downward skip-free lattice walks.
    Lattice { h: f64, r: f64 },
    /// Linear interpolation of knots; linear extrapolation past the last knot
    /// with the slope of the last two.
    Table { grid: Vec<f64>, values: Vec<f64>, tail_slope: f64 },
}

impl RenewalFn {
    /// Closed form when the walk's only negative step is `−h` and drift ≥ 0.
    pub fn exact(walk: &TiltedWalk) -> Option<Self> {
        let h = walk.lattice_span()?;
        let StepLaw::Atoms { values, probs } = walk.law() else {
            return None;
        };
        if walk.drift() < -DRIFT_TOL {
            return None;
        }
        let min = values.iter().zip(probs).filter(|(_, p)| **p > 0.0).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        if (min + h).abs() > 1e-12 * h {
            return None;
        }
        if walk.is_centered() {
            return Some(RenewalFn::Lattice { h, r: 1.0 });
        }
        // r ∈ (0, 1) with E[r^{X/h}] = 1; f > 0 near 0 and < 0 just below 1
        let f = |r: f64| kahan_sum(values.iter().zip(probs).map(|(v, p)| p * r.powf(v / h))) - 1.0;
        let (mut lo, mut hi) = (1e-300f64, 1.0 - 1e-12);
        if f(hi) >= 0.0 {
            return Some(RenewalFn::Lattice { h, r: 1.0 });
        }
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(RenewalFn::Lattice { h, r: 0.5 * (lo + hi) })
    }

    pub fn from_table(grid: &[f64], values: &[f64]) -> Self {
        let n = grid.len();
        let tail_slope =
            if n >= 2 { ((values[n - 1] - values[n - 2]) / (grid[n - 1] - grid[n - 2])).max(0.0) } else { 0.0 };
        RenewalFn::Table { grid: grid.to_vec(), values: values.to_vec(), tail_slope }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            RenewalFn::Lattice { h, r } => {
                let n = (x / h + 1e-9).floor();
                if *r == 1.0 {
                    n + 1.0
                } else {
                    (1.0 - r.powf(n + 1.0)) / (1.0 - r)
                }
            }
            RenewalFn::Table { grid, values, tail_slope } => {
                let k = grid.partition_point(|g| *g <= x);
                if k == 0 {
                    values[0]
                } else if k == grid.len() {
                    values[k - 1] + tail_slope * (x - grid[k - 1])
                } else {
                    let (x0, x1) = (grid[k - 1], grid[k]);
                    let w = (x - x0) / (x1 - x0);
                    values[k - 1] * (1.0 - w) + values[k] * w
                }
            }
        }
    }

    /// Largest `x` covered without extrapolation.
    pub fn covered(&self) -> f64 {
        match self {
            RenewalFn::Lattice { .. } => f64::INFINITY,
            RenewalFn::Table { grid, .. } => *grid.last().unwrap_or(&0.0),
        }
    }

    /// `lim R(x)/x` (critical) is not tracked; this is `lim R` when finite.
    pub fn limit(&self) -> Option<f64> {
        match self {
            RenewalFn::Lattice { r, .. } if *r < 1.0 => Some(1.0 / (1.0 - r)),
            RenewalFn::Table { values, tail_slope, .. } if *tail_slope == 0.0 => values.last().copied(),
            _ => None,
        }
    }
}

fn check_grid(x_grid: &[f64]) -> Result<(), WalkError> {
    if x_grid.is_empty() {
        return Err(WalkError::Invalid("empty renewal grid".into()));
    }
    if x_grid.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(WalkError::Invalid("renewal grid must be finite and >= 0".into()));
    }
    if x_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WalkError::Invalid("renewal grid must be strictly increasing".into()));
    }
    Ok(())
}

struct GridAcc {
    acc: Vec<MeanAcc>,
    truncated: u64,
}

/// Monte Carlo `R` on `x_grid`.
///
/// `VisitCount` averages `#{0 ≤ j < τ*: S_j ≥ −x}` with `τ* = inf{j ≥ 1: S_j ≥ 0}`;
/// `LadderDuality` averages `1 + #{n: H⁻_n ≤ x}` over strict descending
/// ladder heights. Replicas hitting `max_steps` keep their partial counts and
/// are reported as truncated.
pub fn renewal_function(
    walk: &TiltedWalk,
    x_grid: &[f64],
    n_replicas: u64,
    method: RenewalMethod,
    max_steps: u64,
    plan: &Plan,
) -> Result<RenewalEstimate, WalkError> {
    check_grid(x_grid)?;
    if walk.drift() < -DRIFT_TOL {
        return Err(WalkError::NegativeDrift(walk.drift()));
    }
    let g = x_grid.len();
    let x_max = x_grid[g - 1];
    let escape = walk.escape_height().unwrap_or(f64::INFINITY);
    let plan = plan.sub("renewal");
    let out = plan.fold(
        n_replicas,
        || vec![0u64; g + 1],
        || GridAcc { acc: vec![MeanAcc::new(); g], truncated: 0 },
        |acc, diff, _, rng| {
            diff.iter_mut().for_each(|d| *d = 0);
            let mut truncated = false;
            match method {
                RenewalMethod::VisitCount => {
                    // S_0 = 0 is a visit for every x ≥ 0
                    diff[0] += 1;
                    let mut s = 0.0;
                    let mut k = 0u64;
                    loop {
                        if k >= max_steps {
                            truncated = true;
                            break;
                        }
                        s += walk.step(rng);
                        k += 1;
                        if s >= 0.0 {
                            break;
                        }
                        diff[x_grid.partition_point(|x| *x < -s)] += 1;
                    }
                }
                RenewalMethod::LadderDuality => {
                    diff[0] += 1;
                    let (mut s, mut min) = (0.0f64, 0.0f64);
                    let mut k = 0u64;
                    loop {
                        if k >= max_steps {
                            truncated = true;
                            break;
                        }
                        s += walk.step(rng);
                        k += 1;
                        if s < min {
                            min = s;
                            if -s > x_max {
                                break;
                            }
                            diff[x_grid.partition_point(|x| *x < -s)] += 1;
                        } else if s - min > escape {
                            break;
                        }
                    }
                }
            }
            let mut c = 0u64;
            for (i, a) in acc.acc.iter_mut().enumerate() {
                c += diff[i];
                a.push(c as f64);
            }
            acc.truncated += truncated as u64;
        },
        |a, b| {
            for (x, y) in a.acc.iter_mut().zip(&b.acc) {
                x.merge(y);
            }
            a.truncated += b.truncated;
        },
    );
    let r_values: Vec<EstimateWithCI> = out
        .acc
        .iter()
        .map(|a| EstimateWithCI::new(a.mean(), a.stderr(), a.count() as f64, a.count(), out.truncated))
        .collect();
    let raw: Vec<f64> = r_values.iter().map(|e| e.value).collect();
    let weights: Vec<f64> = r_values.iter().map(|e| 1.0 / e.stderr.max(1e-12).powi(2)).collect();
    let monotone_violations = raw.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(RenewalEstimate {
        x_grid: x_grid.to_vec(),
        monotone: isotonic_increasing(&raw, &weights),
        r_values,
        monotone_violations,
        method,
    })
}

/// `C_R` with the passage probe at level `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrReport {
    pub c_r: EstimateWithCI,
    /// `Q[−S_{τ₀⁻}]` (centered walk) or `Q(τ₀⁻ = ∞)` (positive drift).
    pub base: EstimateWithCI,
    pub probe_t: f64,
    /// `P̂(τ_t⁺ < τ_0⁻)` from 0.
    pub passage: EstimateWithCI,
    /// `C_R·t·P̂` (centered) or `C_R·P̂` (positive drift); tends to 1.
    pub product: EstimateWithCI,
}

/// `P(τ_t⁺ < τ_0⁻)` from `x`; runs hitting `max_steps` are dropped and counted.
pub fn passage_probability(
    walk: &TiltedWalk,
    x: f64,
    t: f64,
    n_replicas: u64,
    max_steps: u64,
    plan: &Plan,
) -> EstimateWithCI {
    let (acc, truncated) = plan.sub("passage").fold(
        n_replicas,
        || (),
        || (MeanAcc::new(), 0u64),
        |(acc, tr), _, _, rng| match walk.run_until_passage(x, Some(t), Some(0.0), max_steps, rng).reason {
            StopReason::HitAbove(_) => acc.push(1.0),
            StopReason::HitBelow(_) => acc.push(0.0),
            _ => *tr += 1,
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1 += b.1;
        },
    );
    binomial_estimate(&acc, truncated)
}

/// Bernoulli mean with a nonzero error bound when no successes or failures
/// were seen.
fn binomial_estimate(acc: &MeanAcc, excluded: u64) -> EstimateWithCI {
    let mut e = EstimateWithCI::from_mean(acc, excluded);
    let n = acc.count() as f64;
    if e.stderr == 0.0 && n > 0.0 {
        e.stderr = 1.0 / n;
    }
    e
}

#[allow(non_snake_case)]
pub fn estimate_C_R(
    walk: &TiltedWalk,
    n_replicas: u64,
    probe_t: f64,
    max_steps: u64,
    plan: &Plan,
) -> Result<CrReport, WalkError> {
    let plan = plan.sub("c_r");
    let (base, c_r) = if walk.is_centered() {
        let (acc, truncated) = plan.fold(
            n_replicas,
            || (),
            || (MeanAcc::new(), 0u64),
            |(acc, tr), _, _, rng| {
                let p = walk.run_until_passage(0.0, None, Some(0.0), max_steps, rng);
                match p.undershoot() {
                    // −S_{τ₀⁻} = undershoot below 0
                    Some(u) => acc.push(u),
                    None => *tr += 1,
                }
            },
            |a, b| {
                a.0.merge(&b.0);
                a.1 += b.1;
            },
        );
        let base = EstimateWithCI::from_mean(&acc, truncated);
        let c_r = base.map(|m| 1.0 / m, |m| -1.0 / (m * m));
        (base, c_r)
    } else if walk.drift() > 0.0 {
        let escape = walk.escape_height().expect("positive drift");
        let (acc, truncated) = plan.fold(
            n_replicas,
            || (),
            || (MeanAcc::new(), 0u64),
            |(acc, tr), _, _, rng| match walk.run_until_passage(0.0, Some(escape), Some(0.0), max_steps, rng).reason {
                StopReason::HitAbove(_) => acc.push(1.0),
                StopReason::HitBelow(_) => acc.push(0.0),
                _ => *tr += 1,
            },
            |a, b| {
                a.0.merge(&b.0);
                a.1 += b.1;
            },
        );
        let base = binomial_estimate(&acc, truncated);
        let c_r = base.map(|p| 1.0 / p, |p| -1.0 / (p * p));
        (base, c_r)
    } else {
        return Err(WalkError::NegativeDrift(walk.drift()));
    };
    let passage = passage_probability(walk, 0.0, probe_t, n_replicas, max_steps, &plan);
    let scale = if walk.is_centered() { probe_t } else { 1.0 };
    let value = c_r.value * passage.value * scale;
    let stderr = scale * ((c_r.value * passage.stderr).powi(2) + (passage.value * c_r.stderr).powi(2)).sqrt();
    let product = EstimateWithCI::new(value, stderr, passage.n_effective, passage.replicas, passage.truncated);
    Ok(CrReport { c_r, base, probe_t, passage, product })
}

/// Working memory for Tanaka paths.
#[derive(Debug, Default, Clone)]
pub struct TanakaScratch {
    ring: Vec<f64>,
    /// `ζ_0, …, ζ_n` of the last successful sample.
    pub positions: Vec<f64>,
}

/// Summary of one Tanaka path held in a [`TanakaScratch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanakaInfo {
    /// Length `σ̃` of the first glued segment.
    pub first_segment: u64,
    /// `H₁ = ζ_{σ̃}`, the first ladder height.
    pub first_height: f64,
}

/// Truncated sample: some ladder segment exceeded `max_segment` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentTruncated;

/// Fills `scratch.positions` with `ζ_0..ζ_n`: independent pre-ladder segments,
/// each replayed backwards from its ladder epoch and stacked on the previous
/// ladder height.
pub fn tanaka_into<R: Rng + ?Sized>(
    walk: &TiltedWalk,
    n_steps: usize,
    max_segment: u64,
    rng: &mut R,
    scratch: &mut TanakaScratch,
) -> Result<TanakaInfo, SegmentTruncated> {
    let out = &mut scratch.positions;
    out.clear();
    out.push(0.0);
    let mut info = None;
    loop {
        let need = n_steps + 1 - out.len();
        if need == 0 && info.is_some() {
            break;
        }
        let cap = need.max(1);
        let ring = &mut scratch.ring;
        ring.clear();
        ring.resize(cap, 0.0);
        let (mut s, mut len, mut head) = (0.0f64, 0u64, 0usize);
        loop {
            let x = walk.step(rng);
            s += x;
            ring[head] = x;
            head = (head + 1) % cap;
            len += 1;
            if s > 0.0 {
                break;
            }
            if len >= max_segment {
                return Err(SegmentTruncated);
            }
        }
        if info.is_none() {
            info = Some(TanakaInfo { first_segment: len, first_height: s });
        }
        let take = (need as u64).min(len) as usize;
        let mut pos = *out.last().expect("nonempty");
        for i in 0..take {
            let idx = (head + cap - 1 - i) % cap;
            pos += ring[idx];
            assert!(pos > 0.0, "Tanaka path left (0, inf)");
            out.push(pos);
        }
    }
    Ok(info.expect("first segment"))
}

pub fn tanaka_conditioned_walk<R: Rng + ?Sized>(
    walk: &TiltedWalk,
    n_steps: usize,
    max_segment: u64,
    rng: &mut R,
) -> Result<WalkPath, SegmentTruncated> {
    let mut scratch = TanakaScratch::default();
    tanaka_into(walk, n_steps, max_segment, rng, &mut scratch)?;
    let increments = scratch.positions.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(WalkPath { start: 0.0, increments, stop: StopReason::Horizon })
}

/// Mean first strict ascending ladder height `E[H₁]` from `n` segments.
pub fn mean_ladder_height(
    walk: &TiltedWalk,
    n: u64,
    max_segment: u64,
    plan: &Plan,
) -> Result<EstimateWithCI, WalkError> {
    if walk.drift() < -DRIFT_TOL {
        return Err(WalkError::NegativeDrift(walk.drift()));
    }
    let (acc, truncated) = plan.sub("ladder_height").fold(
        n,
        || (),
        || (MeanAcc::new(), 0u64),
        |(acc, tr), _, _, rng| {
            let p = walk.run_until_passage(0.0, Some(0.0), None, max_segment, rng);
            match p.overshoot() {
                Some(h) => acc.push(h),
                None => *tr += 1,
            }
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1 += b.1;
        },
    );
    Ok(EstimateWithCI::from_mean(&acc, truncated))
}

/// One draw of the size-biased process `Ŝ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatSSample {
    pub path: WalkPath,
    /// `ζ_{σ̃}/E[H₁]`.
    pub weight: f64,
    /// Last time the running minimum over `1..=n` is attained.
    pub sigma_hat: usize,
    pub sigma_tilde: u64,
    /// `σ̃ > n`: `ζ_{σ̃}` lies past the returned horizon.
    pub beyond_horizon: bool,
}

/// Tanaka sampler with importance weights for the `Ŝ` law; `E[H₁]` is
/// estimated once at construction.
#[derive(Debug, Clone)]
pub struct HatSSampler {
    walk: TiltedWalk,
    mean_h1: EstimateWithCI,
    max_segment: u64,
}

impl HatSSampler {
    pub fn new(walk: &TiltedWalk, n_segments: u64, max_segment: u64, plan: &Plan) -> Result<Self, WalkError> {
        let mean_h1 = mean_ladder_height(walk, n_segments, max_segment, plan)?;
        Ok(Self { walk: walk.clone(), mean_h1, max_segment })
    }

    /// Uses a known `E[H₁]`.
    pub fn with_mean(walk: &TiltedWalk, mean_h1: f64, max_segment: u64) -> Self {
        Self { walk: walk.clone(), mean_h1: EstimateWithCI::exact(mean_h1), max_segment }
    }

    pub fn mean_h1(&self) -> &EstimateWithCI {
        &self.mean_h1
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        n_steps: usize,
        rng: &mut R,
        scratch: &mut TanakaScratch,
    ) -> Result<HatSSample, SegmentTruncated> {
        let info = tanaka_into(&self.walk, n_steps.max(1), self.max_segment, rng, scratch)?;
        let z = &scratch.positions;
        let mut min = f64::INFINITY;
        let mut sigma_hat = 1;
        for (k, v) in z.iter().enumerate().skip(1).take(n_steps.max(1)) {
            if *v <= min {
                min = *v;
                sigma_hat = k;
            }
        }
        let increments = z.windows(2).take(n_steps).map(|w| w[1] - w[0]).collect();
        Ok(HatSSample {
            path: WalkPath { start: 0.0, increments, stop: StopReason::Horizon },
            weight: info.first_height / self.mean_h1.value,
            sigma_hat,
            sigma_tilde: info.first_segment,
            beyond_horizon: info.first_segment as usize > n_steps,
        })
    }
}

/// Free function form of [`HatSSampler::sample`].
pub fn hat_s_sampler<R: Rng + ?Sized>(
    sampler: &HatSSampler,
    n_steps: usize,
    rng: &mut R,
) -> Result<HatSSample, SegmentTruncated> {
    sampler.sample(n_steps, rng, &mut TanakaScratch::default())
}

/// One step of the `R`-transform of the walk killed below 0, from `y ≥ 0`.
/// Exact categorical sampling on finite laws; rejection with envelope
/// `R(y + |μ| + 8σ)` for Gaussian steps.
pub fn conditioned_step<R: Rng + ?Sized>(
    walk: &TiltedWalk,
    renewal: &RenewalFn,
    y: f64,
    rng: &mut R,
) -> Result<f64, WalkError> {
    if !(y >= 0.0) {
        return Err(WalkError::Invalid(format!("conditioned step needs y >= 0, got {y}")));
    }
    match walk.law() {
        StepLaw::Atoms { values, probs } => {
            let reach = y + values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            if reach > renewal.covered() {
                return Err(WalkError::RenewalRange { needed: reach, covered: renewal.covered() });
            }
            let mut total = 0.0;
            for (v, p) in values.iter().zip(probs) {
                total += p * renewal.eval(y + v);
            }
            if !(total > 0.0) {
                return Err(WalkError::Normalizer { value: total, y });
            }
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = y;
            for (v, p) in values.iter().zip(probs) {
                let w = p * renewal.eval(y + v);
                if w > 0.0 {
                    acc += w;
                    last = y + v;
                    if u < acc {
                        return Ok(y + v);
                    }
                }
            }
            Ok(last)
        }
        StepLaw::Gaussian { mean, sd } => {
            let top = y + mean.abs() + 8.0 * sd;
            if top > renewal.covered() {
                return Err(WalkError::RenewalRange { needed: top, covered: renewal.covered() });
            }
            let env = renewal.eval(top);
            if !(env > 0.0) {
                return Err(WalkError::Normalizer { value: env, y });
            }
            for _ in 0..10_000_000u64 {
                let z = y + walk.step(rng);
                if z >= 0.0 && rng.random::<f64>() * env < renewal.eval(z) {
                    return Ok(z);
                }
            }
            Err(WalkError::Normalizer { value: 0.0, y })
        }
    }
}

/// `k` steps of the conditioned chain from `y0`; returns `Y_0..Y_k`.
pub fn conditioned_walk<R: Rng + ?Sized>(
    walk: &TiltedWalk,
    renewal: &RenewalFn,
    y0: f64,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>, WalkError> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(y0);
    let mut y = y0;
    for _ in 0..k {
        y = conditioned_step(walk, renewal, y, rng)?;
        out.push(y);
    }
    Ok(out)
}

/// Overshoot `S_{τ_t⁺} − t` from 0 for a walk with drift ≥ 0.
pub fn overshoot_mean(
    walk: &TiltedWalk,
    t: f64,
    n_replicas: u64,
    max_steps: u64,
    plan: &Plan,
) -> Result<EstimateWithCI, WalkError> {
    if walk.drift() < -DRIFT_TOL {
        return Err(WalkError::NegativeDrift(walk.drift()));
    }
    let (acc, truncated) = plan.sub("overshoot").fold(
        n_replicas,
        || (),
        || (MeanAcc::new(), 0u64),
        |(acc, tr), _, _, rng| match walk.run_until_passage(0.0, Some(t), None, max_steps, rng).overshoot() {
            Some(o) => acc.push(o),
            None => *tr += 1,
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1 += b.1;
        },
    );
    Ok(EstimateWithCI::from_mean(&acc, truncated))
}
