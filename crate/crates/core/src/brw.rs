//! Forward simulation of the branching random walk killed below a barrier.
//!
//! Trees are explored generation by generation and never materialized: only
//! the frontier, counters, probe-level overshoots and (optionally) the
//! per-particle offspring counts needed to replay the exploration are kept.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelSpec, Regime};
use crate::replica::Plan;
use crate::stats::{EstimateWithCI, MeanAcc, TreeSurvival};

#[derive(Debug, Error)]
pub enum BrwError {
    #[error("start x = {0} must be finite and >= the killing barrier")]
    BadStart(f64),
    #[error("probe level {level} must exceed the start {x}")]
    BadLevel { level: f64, x: f64 },
    #[error("no replica reached level {t}; survival estimate {survival:?}")]
    NoConditioningEvents { t: f64, survival: EstimateWithCI },
    #[error("model regime {0:?} does not give finite killed trees")]
    Regime(Regime),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    /// Bound on alive particles plus leaves.
    pub max_particles: u64,
    pub max_generations: u64,
}

impl Default for Caps {
    fn default() -> Self {
        Self { max_particles: 10_000_000, max_generations: 100_000 }
    }
}

/// What a single tree simulation records.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeOptions {
    /// Killing barrier: particles with `V < lower` are leaves.
    pub lower: f64,
    /// Probe levels, strictly increasing.
    pub levels: Vec<f64>,
    /// Do not expand particles that crossed the top probe level.
    pub stop_at_top: bool,
    pub record_overshoots: bool,
    /// Keep `(ν, alive children)` per particle for the exploration replay.
    pub record_trace: bool,
    /// Tilt for `leaf_mass`/`line_mass`.
    pub tilt: Option<f64>,
    pub caps: Caps,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            lower: 0.0,
            levels: Vec::new(),
            stop_at_top: false,
            record_overshoots: false,
            record_trace: false,
            tilt: None,
            caps: Caps::default(),
        }
    }
}

impl TreeOptions {
    pub fn with_levels(levels: &[f64]) -> Self {
        Self { levels: levels.to_vec(), ..Self::default() }
    }
}

/// Counters of one killed tree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub start_x: f64,
    /// `Z`: particles that lived (root included).
    pub total_progeny: u64,
    /// `#L[0]`: children born below the barrier.
    pub leaf_count: u64,
    /// `1 + Σ_explored (ν − 1)`; equals `leaf_count` on complete trees and
    /// exceeds it by the unexplored frontier otherwise.
    pub exploration_y: i64,
    pub levels: Vec<f64>,
    /// `H(L)` per level.
    pub h_levels: Vec<u64>,
    /// `Z[0, L]`: leaves whose lineage never crossed `L`.
    pub z0l: Vec<u64>,
    /// `{V(u) − L : u ∈ 𝓗(L)}` per level, when recorded.
    pub overshoots: Vec<Vec<f64>>,
    pub max_position: f64,
    pub truncated: bool,
    /// Particles past the top level were left unexpanded.
    pub stopped_at_top: bool,
    pub generations: u64,
    /// `Σ_{u ∈ L[lower]} e^{ϱV(u)}` for the optional tilt.
    pub leaf_mass: f64,
    /// `Σ_{u ∈ 𝓗(top)} e^{ϱV(u)}` for the optional tilt.
    pub line_mass: f64,
}

impl TreeRecord {
    pub fn complete(&self) -> bool {
        !self.truncated && !self.stopped_at_top
    }
}

/// Offspring counts of the alive particles in breadth-first order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExplorationTrace {
    /// `ν(u)`: all children, killed ones included.
    pub nu: Vec<u32>,
    /// Children of `u` that are alive.
    pub alive: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationCheck {
    Holds,
    Fails,
    Indeterminate,
}

impl ExplorationTrace {
    pub fn clear(&mut self) {
        self.nu.clear();
        self.alive.clear();
    }

    /// Replays the exploration in depth-first lexicographic order and
    /// returns `Y_Z`, or `None` when the trace does not describe a tree.
    pub fn replay(&self) -> Option<i64> {
        let z = self.nu.len();
        if z == 0 || self.alive.len() != z {
            return None;
        }
        // first child index of each particle in breadth-first numbering
        let mut first = Vec::with_capacity(z);
        let mut next = 1usize;
        for a in &self.alive {
            first.push(next);
            next += *a as usize;
        }
        if next != z {
            return None;
        }
        let mut stack = vec![0usize];
        let mut y = 1i64;
        let mut visited = 0usize;
        while let Some(u) = stack.pop() {
            visited += 1;
            if u >= z || self.alive[u] > self.nu[u] {
                return None;
            }
            y += self.nu[u] as i64 - 1;
            // exploration continues while unexplored alive particles remain
            if visited < z && y < 1 {
                return None;
            }
            let a = self.alive[u] as usize;
            for c in (first[u]..first[u] + a).rev() {
                stack.push(c);
            }
        }
        (visited == z).then_some(y)
    }
}

/// Checks `Y_Z = #L[0]` against a replayed trace.
pub fn exploration_check(record: &TreeRecord, trace: &ExplorationTrace) -> ExplorationCheck {
    if !record.complete() {
        return ExplorationCheck::Indeterminate;
    }
    match trace.replay() {
        Some(y) if y == record.leaf_count as i64 && y == record.exploration_y => ExplorationCheck::Holds,
        _ => ExplorationCheck::Fails,
    }
}

/// Reusable simulator; keeps its buffers between trees.
#[derive(Debug, Default)]
pub struct KilledTreeSim {
    cur: Vec<(f64, u32)>,
    next: Vec<(f64, u32)>,
    children: Vec<f64>,
    leaves_by_crossed: Vec<u64>,
    pub trace: ExplorationTrace,
    pub record: TreeRecord,
}

impl KilledTreeSim {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulates one tree from `x`; the result is left in `self.record`.
    pub fn run<R: Rng + ?Sized>(&mut self, model: &ModelSpec, x: f64, opts: &TreeOptions, rng: &mut R) -> &TreeRecord {
        self.run_with(x, opts, |out| model.sample_offspring_into(rng, out))
    }

    /// Like [`run`](Self::run) with an arbitrary source of displacement
    /// patterns, called once per explored particle in breadth-first order.
    pub fn run_with<F: FnMut(&mut Vec<f64>)>(&mut self, x: f64, opts: &TreeOptions, mut offspring: F) -> &TreeRecord {
        let levels = &opts.levels;
        let n_levels = levels.len();
        let rec = &mut self.record;
        rec.start_x = x;
        rec.levels.clear();
        rec.levels.extend_from_slice(levels);
        rec.h_levels.clear();
        rec.h_levels.resize(n_levels, 0);
        rec.z0l.clear();
        rec.z0l.resize(n_levels, 0);
        rec.overshoots.resize_with(n_levels, Vec::new);
        rec.overshoots.truncate(n_levels);
        rec.overshoots.iter_mut().for_each(Vec::clear);
        rec.total_progeny = 1;
        rec.leaf_count = 0;
        rec.exploration_y = 1;
        rec.max_position = x;
        rec.truncated = false;
        rec.stopped_at_top = false;
        rec.generations = 0;
        rec.leaf_mass = 0.0;
        rec.line_mass = 0.0;
        self.leaves_by_crossed.clear();
        self.leaves_by_crossed.resize(n_levels + 1, 0);
        self.trace.clear();
        self.cur.clear();
        self.next.clear();

        let crossed_at = |v: f64| levels.partition_point(|l| *l < v) as u32;
        let root_crossed = crossed_at(x);
        if root_crossed as usize == n_levels && n_levels > 0 && opts.stop_at_top {
            rec.stopped_at_top = true;
            return &self.record;
        }
        self.cur.push((x, root_crossed));
        let tilt = opts.tilt.unwrap_or(0.0);
        let cap = opts.caps.max_particles;
        'gens: while !self.cur.is_empty() {
            if rec.generations >= opts.caps.max_generations {
                rec.truncated = true;
                break;
            }
            for i in 0..self.cur.len() {
                if rec.total_progeny + rec.leaf_count > cap {
                    rec.truncated = true;
                    break 'gens;
                }
                let (pos, crossed) = self.cur[i];
                offspring(&mut self.children);
                let nu = self.children.len();
                let mut alive = 0u32;
                for &d in &self.children {
                    let v = pos + d;
                    if v < opts.lower {
                        rec.leaf_count += 1;
                        self.leaves_by_crossed[crossed as usize] += 1;
                        if opts.tilt.is_some() {
                            rec.leaf_mass += (tilt * v).exp();
                        }
                        continue;
                    }
                    alive += 1;
                    rec.total_progeny += 1;
                    if v > rec.max_position {
                        rec.max_position = v;
                    }
                    let mut c = crossed;
                    while (c as usize) < n_levels && v > levels[c as usize] {
                        rec.h_levels[c as usize] += 1;
                        if opts.record_overshoots {
                            rec.overshoots[c as usize].push(v - levels[c as usize]);
                        }
                        c += 1;
                    }
                    let at_top = n_levels > 0 && c as usize == n_levels;
                    if at_top && c > crossed && opts.tilt.is_some() {
                        rec.line_mass += (tilt * v).exp();
                    }
                    if at_top && opts.stop_at_top {
                        rec.stopped_at_top = true;
                    } else {
                        self.next.push((v, c));
                    }
                }
                rec.exploration_y += nu as i64 - 1;
                if opts.record_trace {
                    self.trace.nu.push(nu as u32);
                    self.trace.alive.push(alive);
                }
            }
            std::mem::swap(&mut self.cur, &mut self.next);
            self.next.clear();
            rec.generations += 1;
        }
        // leaves whose lineage crossed fewer than k+1 levels never crossed level k
        let mut acc = 0u64;
        for k in 0..n_levels {
            acc += self.leaves_by_crossed[k];
            rec.z0l[k] = acc;
        }
        &self.record
    }
}

fn check_levels(x: f64, levels: &[f64]) -> Result<(), BrwError> {
    if !x.is_finite() || x < 0.0 {
        return Err(BrwError::BadStart(x));
    }
    let mut prev = x;
    for l in levels {
        if !(*l > prev) {
            return Err(BrwError::BadLevel { level: *l, x: prev });
        }
        prev = *l;
    }
    Ok(())
}

/// One killed tree with killing below 0, probes at `probe_levels`.
///
/// Particles above the largest probe are not expanded, so a tree that crosses
/// it is incomplete and its exploration check is indeterminate.
pub fn simulate_killed_tree<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: f64,
    probe_levels: &[f64],
    caps: Caps,
    rng: &mut R,
) -> Result<(TreeRecord, ExplorationTrace), BrwError> {
    check_levels(x, probe_levels)?;
    let mut sim = KilledTreeSim::new();
    let opts = TreeOptions {
        levels: probe_levels.to_vec(),
        record_overshoots: true,
        record_trace: true,
        stop_at_top: !probe_levels.is_empty(),
        caps,
        ..TreeOptions::default()
    };
    sim.run(model, x, &opts, rng);
    Ok((sim.record, sim.trace))
}

/// Compact per-tree row for record tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRow {
    pub replica: u64,
    pub z: u64,
    pub leaves: u64,
    pub h: Vec<u64>,
    pub truncated: bool,
}

/// Aggregate over many trees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub x: f64,
    pub levels: Vec<f64>,
    pub replicas: u64,
    pub truncated: u64,
    /// `P̂(H(L) > 0)` per level.
    pub survival: Vec<EstimateWithCI>,
    /// `Ê[H(L)]` per level.
    pub mean_h: Vec<EstimateWithCI>,
    pub mean_z: EstimateWithCI,
    pub mean_leaves: EstimateWithCI,
    /// Complete trees on which `Y_Z = #L[0]` was replayed and held.
    pub exploration_holds: u64,
    pub exploration_fails: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub stop_at_top: bool,
    pub check_exploration: bool,
    pub keep_rows: bool,
}

struct ForwardAcc {
    survival: Vec<MeanAcc>,
    mean_h: Vec<MeanAcc>,
    z: MeanAcc,
    leaves: MeanAcc,
    truncated: u64,
    holds: u64,
    fails: u64,
    rows: Vec<TreeRow>,
    tails: TreeSurvival,
}

/// Simulates `n` trees from `x`. Truncated trees are excluded from the
/// means and counted.
pub fn forward_survey(
    model: &ModelSpec,
    x: f64,
    levels: &[f64],
    n: u64,
    caps: Caps,
    fopts: ForwardOptions,
    plan: &Plan,
) -> Result<(ForwardSummary, Vec<TreeRow>), BrwError> {
    forward_survey_with_tails(model, x, levels, n, caps, fopts, &[], plan).map(|(s, rows, _)| (s, rows))
}

/// [`forward_survey`] that also tabulates `P̂(Z > n)` and `P̂(#L[0] > n)` on
/// `grid`; trees stopped at the top level count as censored there.
#[allow(clippy::too_many_arguments)]
pub fn forward_survey_with_tails(
    model: &ModelSpec,
    x: f64,
    levels: &[f64],
    n: u64,
    caps: Caps,
    fopts: ForwardOptions,
    grid: &[u64],
    plan: &Plan,
) -> Result<(ForwardSummary, Vec<TreeRow>, TreeSurvival), BrwError> {
    check_levels(x, levels)?;
    let k = levels.len();
    let opts = TreeOptions {
        levels: levels.to_vec(),
        stop_at_top: fopts.stop_at_top,
        record_trace: fopts.check_exploration,
        caps,
        ..TreeOptions::default()
    };
    let acc = plan.sub("forward").fold(
        n,
        KilledTreeSim::new,
        || ForwardAcc {
            survival: vec![MeanAcc::new(); k],
            mean_h: vec![MeanAcc::new(); k],
            z: MeanAcc::new(),
            leaves: MeanAcc::new(),
            truncated: 0,
            holds: 0,
            fails: 0,
            rows: Vec::new(),
            tails: TreeSurvival::new(grid, model.mean_offspring(), 1.0),
        },
        |acc, sim, i, rng| {
            sim.run(model, x, &opts, rng);
            let rec = &sim.record;
            if !grid.is_empty() {
                acc.tails.push(rec.total_progeny, rec.leaf_count, rec.truncated || rec.stopped_at_top);
            }
            if fopts.keep_rows {
                acc.rows.push(TreeRow {
                    replica: i,
                    z: rec.total_progeny,
                    leaves: rec.leaf_count,
                    h: rec.h_levels.clone(),
                    truncated: rec.truncated,
                });
            }
            if fopts.check_exploration {
                match exploration_check(rec, &sim.trace) {
                    ExplorationCheck::Holds => acc.holds += 1,
                    ExplorationCheck::Fails => acc.fails += 1,
                    ExplorationCheck::Indeterminate => {}
                }
            }
            if rec.truncated {
                acc.truncated += 1;
                return;
            }
            for j in 0..k {
                acc.survival[j].push((rec.h_levels[j] > 0) as u8 as f64);
                acc.mean_h[j].push(rec.h_levels[j] as f64);
            }
            if !rec.stopped_at_top {
                acc.z.push(rec.total_progeny as f64);
                acc.leaves.push(rec.leaf_count as f64);
            }
        },
        |a, b| {
            for j in 0..k {
                a.survival[j].merge(&b.survival[j]);
                a.mean_h[j].merge(&b.mean_h[j]);
            }
            a.z.merge(&b.z);
            a.leaves.merge(&b.leaves);
            a.truncated += b.truncated;
            a.holds += b.holds;
            a.fails += b.fails;
            a.rows.extend(b.rows);
            a.tails.merge(&b.tails);
        },
    );
    let est = |m: &MeanAcc| EstimateWithCI::from_mean(m, acc.truncated);
    let summary = ForwardSummary {
        x,
        levels: levels.to_vec(),
        replicas: n,
        truncated: acc.truncated,
        survival: acc.survival.iter().map(est).collect(),
        mean_h: acc.mean_h.iter().map(est).collect(),
        mean_z: est(&acc.z),
        mean_leaves: est(&acc.leaves),
        exploration_holds: acc.holds,
        exploration_fails: acc.fails,
    };
    Ok((summary, acc.rows, acc.tails))
}

/// Martingale values at one generation of the unkilled walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    pub generation: u64,
    /// `Σ e^{ϱV(u)}` with the regime tilt.
    pub additive_w: f64,
    /// `−Σ ϱ*V(u) e^{ϱ*V(u)}` in the critical regime.
    pub derivative_dw: Option<f64>,
    /// `Σ e^{ϱ−V(u)}` in the subcritical regime.
    pub m_rho_minus: Option<f64>,
    pub population: u64,
    pub extinct: bool,
    pub truncated: bool,
}

/// Tilts used by [`martingale_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleTilts {
    pub rho: f64,
    pub derivative_rho: Option<f64>,
    pub rho_minus: Option<f64>,
}

impl MartingaleTilts {
    pub fn for_model(model: &ModelSpec) -> Result<Self, BrwError> {
        let a = model.analyze()?;
        match a.regime {
            Regime::Critical => Ok(Self { rho: a.rho_star, derivative_rho: Some(a.rho_star), rho_minus: None }),
            Regime::Subcritical => {
                Ok(Self { rho: a.rho_plus.expect("subcritical roots"), derivative_rho: None, rho_minus: a.rho_minus })
            }
            r => Err(BrwError::Regime(r)),
        }
    }
}

/// Generations `0..=n_max` of the BRW without killing, stopping early on
/// extinction or when the population exceeds `max_population`.
pub fn martingale_trajectory<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: f64,
    n_max: u64,
    tilts: MartingaleTilts,
    max_population: u64,
    rng: &mut R,
) -> Vec<MartingaleSample> {
    let mut cur = vec![x];
    let mut next = Vec::new();
    let mut children = Vec::new();
    let mut out = Vec::with_capacity(n_max as usize + 1);
    let sample = |gen: u64, pop: &[f64], truncated: bool| {
        let mut w = 0.0;
        let mut dw = 0.0;
        let mut m = 0.0;
        for v in pop {
            w += (tilts.rho * v).exp();
            if let Some(r) = tilts.derivative_rho {
                dw -= r * v * (r * v).exp();
            }
            if let Some(r) = tilts.rho_minus {
                m += (r * v).exp();
            }
        }
        MartingaleSample {
            generation: gen,
            additive_w: w,
            derivative_dw: tilts.derivative_rho.map(|_| dw),
            m_rho_minus: tilts.rho_minus.map(|_| m),
            population: pop.len() as u64,
            extinct: pop.is_empty(),
            truncated,
        }
    };
    out.push(sample(0, &cur, false));
    for gen in 1..=n_max {
        next.clear();
        for &p in &cur {
            model.sample_offspring_into(rng, &mut children);
            next.extend(children.iter().map(|d| p + d));
        }
        std::mem::swap(&mut cur, &mut next);
        let truncated = cur.len() as u64 > max_population;
        out.push(sample(gen, &cur, truncated));
        if cur.is_empty() || truncated {
            break;
        }
    }
    out
}

/// Sum over the two-sided line: particles at their first exit from
/// `[floor, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineMass {
    /// `Σ_{u ∈ 𝓒_t} e^{ϱV(u)}` over first crossings above `t`.
    pub upper: f64,
    /// `Σ_{u ∈ L[floor]} e^{ϱV(u)}` over first entries below `floor`.
    pub floor: f64,
    pub truncated: bool,
}

/// `E_x[upper + floor] = e^{ϱx}` for any mass-one tilt whose walk leaves
/// `[floor, t]` almost surely.
#[allow(clippy::too_many_arguments)]
pub fn optional_line_mass<R: Rng + ?Sized>(
    model: &ModelSpec,
    rho: f64,
    x: f64,
    t: f64,
    floor: f64,
    caps: Caps,
    sim: &mut KilledTreeSim,
    rng: &mut R,
) -> LineMass {
    let opts = TreeOptions {
        lower: floor,
        levels: vec![t],
        stop_at_top: true,
        tilt: Some(rho),
        caps,
        ..TreeOptions::default()
    };
    let rec = sim.run(model, x, &opts, rng);
    LineMass { upper: rec.line_mass, floor: rec.leaf_mass, truncated: rec.truncated }
}

/// Per-replica Yaglom functionals given `H(t) > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YaglomSample {
    pub count: u64,
    /// `Σ e^{ϱ(V(u) − t)}` over `𝓗(t)`.
    pub mass: f64,
    pub min_overshoot: f64,
    pub overshoots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YaglomDataset {
    pub x: f64,
    pub t: f64,
    pub rho: f64,
    pub samples: Vec<YaglomSample>,
    /// `P̂(H(t) > 0)`.
    pub survival: EstimateWithCI,
    pub truncated: u64,
}

pub fn yaglom_samples(
    model: &ModelSpec,
    x: f64,
    t: f64,
    rho: f64,
    n_replicas: u64,
    caps: Caps,
    plan: &Plan,
) -> Result<YaglomDataset, BrwError> {
    check_levels(x, &[t])?;
    let opts =
        TreeOptions { levels: vec![t], stop_at_top: true, record_overshoots: true, caps, ..TreeOptions::default() };
    let (hits, samples, truncated) = plan.sub("yaglom").fold(
        n_replicas,
        KilledTreeSim::new,
        || (MeanAcc::new(), Vec::new(), 0u64),
        |(hits, samples, tr), sim, _, rng| {
            let rec = sim.run(model, x, &opts, rng);
            if rec.truncated {
                *tr += 1;
                return;
            }
            let over = &rec.overshoots[0];
            hits.push((!over.is_empty()) as u8 as f64);
            if !over.is_empty() {
                samples.push(YaglomSample {
                    count: over.len() as u64,
                    mass: over.iter().map(|o| (rho * o).exp()).sum(),
                    min_overshoot: over.iter().copied().fold(f64::INFINITY, f64::min),
                    overshoots: over.clone(),
                });
            }
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1.extend(b.1);
            a.2 += b.2;
        },
    );
    let mut survival = EstimateWithCI::from_mean(&hits, truncated);
    if samples.is_empty() {
        survival.stderr = 1.0 / hits.count().max(1) as f64;
        return Err(BrwError::NoConditioningEvents { t, survival });
    }
    Ok(YaglomDataset { x, t, rho, samples, survival, truncated })
}
