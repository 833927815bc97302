//! Exact reference values for small finite-support trees and lattice walks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::KahanSum;
use crate::model::ModelSpec;
use crate::walk::{StepLaw, TiltedWalk};

/// Default bound on the number of weighted terms.
pub const TERM_BUDGET: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration needs a finite-support model")]
    NotFinite,
    #[error("depth {depth} needs {terms} terms (budget {budget}); feasible depth is {feasible}")]
    Budget { depth: usize, terms: f64, budget: u64, feasible: usize },
    #[error("walk oracle needs a lattice step law")]
    NonLattice,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// A functional of the branching walk that is a sum over particles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeFunctional {
    /// `#{|u| = n}`.
    Count { n: usize },
    /// `#{|u| = n}` in the tree killed below 0.
    AliveCount { n: usize },
    /// `W_n = Σ_{|u|=n} e^{ϱV(u)}`.
    Additive { n: usize, rho: f64 },
    /// `∂W_n = −Σ_{|u|=n} ϱV(u) e^{ϱV(u)}`.
    Derivative { n: usize, rho: f64 },
    /// `#{u ∈ 𝓗(L), |u| ≤ depth}` in the killed tree.
    Crossings { level: f64, depth: usize },
    /// `#{u ∈ L[0], |u| ≤ depth}`.
    Leaves { depth: usize },
}

impl TreeFunctional {
    pub fn depth(&self) -> usize {
        match *self {
            TreeFunctional::Count { n }
            | TreeFunctional::AliveCount { n }
            | TreeFunctional::Additive { n, .. }
            | TreeFunctional::Derivative { n, .. } => n,
            TreeFunctional::Crossings { depth, .. } | TreeFunctional::Leaves { depth } => depth,
        }
    }

    pub fn name(&self) -> String {
        match self {
            TreeFunctional::Count { n } => format!("count[{n}]"),
            TreeFunctional::AliveCount { n } => format!("alive_count[{n}]"),
            TreeFunctional::Additive { n, .. } => format!("W[{n}]"),
            TreeFunctional::Derivative { n, .. } => format!("dW[{n}]"),
            TreeFunctional::Crossings { level, depth } => format!("H({level})[<={depth}]"),
            TreeFunctional::Leaves { depth } => format!("leaves[<={depth}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationResult {
    pub depth: usize,
    pub expectations: BTreeMap<String, f64>,
    pub outcome_count: u64,
    /// `|Σ p − 1|` over the offspring outcomes.
    pub mass_error: f64,
}

/// Visit decision of a lineage walk.
enum Visit {
    /// Add the value and stop the lineage.
    Stop(f64),
    /// Add the value and continue to the children.
    Go(f64),
}

struct Enum<'a> {
    outcomes: &'a [(f64, Vec<f64>)],
    path: Vec<f64>,
    terms: u64,
}

impl Enum<'_> {
    /// `Σ_lineages Π p · visit(path)`; each particle is reached once per
    /// offspring outcome sequence along its ancestry.
    fn run(&mut self, depth: usize, visit: &dyn Fn(&[f64]) -> Visit) -> f64 {
        let mut acc = KahanSum::new();
        let v = match visit(&self.path) {
            Visit::Stop(v) => return v,
            Visit::Go(v) => v,
        };
        acc.add(v);
        if self.path.len() > depth {
            return acc.value();
        }
        let here = *self.path.last().expect("root");
        for (p, pattern) in self.outcomes {
            for d in pattern {
                self.terms += 1;
                self.path.push(here + d);
                acc.add(p * self.run(depth, visit));
                self.path.pop();
            }
        }
        acc.value()
    }
}

fn outcomes_of(model: &ModelSpec) -> Result<Vec<(f64, Vec<f64>)>, OracleError> {
    model.outcomes().ok_or(OracleError::NotFinite)
}

/// Worst-case number of weighted terms at `depth`.
pub fn term_count(model: &ModelSpec, depth: usize) -> Result<f64, OracleError> {
    let b: f64 = outcomes_of(model)?.iter().map(|(_, p)| p.len() as f64).sum();
    Ok((1..=depth).map(|k| b.powi(k as i32)).sum::<f64>())
}

/// Exact `E_x[F]` for a particle-sum functional.
pub fn enumerate_tree_expectation(model: &ModelSpec, x: f64, functional: TreeFunctional) -> Result<f64, OracleError> {
    enumerate_tree_with_budget(model, x, &[functional], TERM_BUDGET).map(|r| r.expectations[&functional.name()])
}

/// Several functionals of one model at once, under a term budget.
pub fn enumerate_tree_with_budget(
    model: &ModelSpec,
    x: f64,
    functionals: &[TreeFunctional],
    budget: u64,
) -> Result<EnumerationResult, OracleError> {
    let outcomes = outcomes_of(model)?;
    let depth = functionals.iter().map(|f| f.depth()).max().unwrap_or(0);
    let terms = term_count(model, depth)?;
    if terms > budget as f64 {
        let feasible = (0..=depth)
            .take_while(|d| term_count(model, *d).map(|t| t <= budget as f64).unwrap_or(false))
            .last()
            .unwrap_or(0);
        return Err(OracleError::Budget { depth, terms, budget, feasible });
    }
    let mass_error = (outcomes.iter().map(|(p, _)| p).sum::<f64>() - 1.0).abs();
    let mut expectations = BTreeMap::new();
    let mut outcome_count = 0;
    for f in functionals {
        let mut e = Enum { outcomes: &outcomes, path: vec![x], terms: 0 };
        let value = match *f {
            TreeFunctional::Count { n } => e.run(n, &|p| at_generation(p, n, 1.0)),
            TreeFunctional::AliveCount { n } => e.run(n, &|p| {
                if *p.last().unwrap() < 0.0 {
                    Visit::Stop(0.0)
                } else {
                    at_generation(p, n, 1.0)
                }
            }),
            TreeFunctional::Additive { n, rho } => e.run(n, &|p| at_generation(p, n, (rho * p.last().unwrap()).exp())),
            TreeFunctional::Derivative { n, rho } => e.run(n, &|p| {
                let v = rho * p.last().unwrap();
                at_generation(p, n, -v * v.exp())
            }),
            TreeFunctional::Crossings { level, depth } => e.run(depth, &|p| {
                let v = *p.last().unwrap();
                if v < 0.0 {
                    Visit::Stop(0.0)
                } else if v > level {
                    // the root itself is not a crossing
                    Visit::Stop(if p.len() > 1 { 1.0 } else { 0.0 })
                } else {
                    Visit::Go(0.0)
                }
            }),
            TreeFunctional::Leaves { depth } => e.run(depth, &|p| {
                if *p.last().unwrap() < 0.0 {
                    Visit::Stop(1.0)
                } else {
                    Visit::Go(0.0)
                }
            }),
        };
        outcome_count += e.terms;
        expectations.insert(f.name(), value);
    }
    Ok(EnumerationResult { depth, expectations, outcome_count, mass_error })
}

fn at_generation(path: &[f64], n: usize, value: f64) -> Visit {
    if path.len() == n + 1 {
        Visit::Stop(value)
    } else {
        Visit::Go(0.0)
    }
}

/// A first-passage functional of a lattice walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WalkFunctional {
    /// `P_x(τ_t⁺ < τ_0⁻)`.
    Passage { t: f64 },
    /// `P_x(τ_0⁻ = ∞)`, resolved on `[0, cutoff]`.
    Escape { cutoff: f64 },
    /// `E_x[e^{−s S_{τ_0⁻}}; τ_0⁻ < ∞]`, resolved on `[0, cutoff]`.
    UndershootLaplace { s: f64, cutoff: f64 },
    /// `E_x[−S_{τ_0⁻}; τ_0⁻ < ∞]`, resolved on `[0, cutoff]`.
    UndershootMean { cutoff: f64 },
    /// `P_x(S_k ≥ 0 for k ≤ horizon)`.
    StayNonnegative { horizon: usize },
    /// `E_x[e^{−s S_n}; S_k ≥ 0 for k ≤ n]`.
    KilledLaplace { s: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkOracleValue {
    pub value: f64,
    /// Bound on `|value − truth|` from the cutoff.
    pub error_bound: f64,
}

struct Lattice {
    h: f64,
    steps: Vec<(i64, f64)>,
}

fn lattice(walk: &TiltedWalk) -> Result<Lattice, OracleError> {
    let h = walk.lattice_span().ok_or(OracleError::NonLattice)?;
    let StepLaw::Atoms { values, probs } = walk.law() else {
        return Err(OracleError::NonLattice);
    };
    let steps =
        values.iter().zip(probs).filter(|(_, p)| **p > 0.0).map(|(v, p)| ((v / h).round() as i64, *p)).collect();
    Ok(Lattice { h, steps })
}

/// Exit law of `[lower, upper]` (indices relative to the lattice through
/// `x`), as `(exit index, probability)`.
fn exit_law(lat: &Lattice, start: i64, lower: i64, upper: i64) -> Result<Vec<(i64, f64)>, OracleError> {
    let n = (upper - lower + 1) as usize;
    if n > 4000 {
        return Err(OracleError::Invalid(format!("{n} interior states is too many")));
    }
    let max_up = lat.steps.iter().map(|s| s.0).max().unwrap_or(0).max(0);
    let max_dn = lat.steps.iter().map(|s| -s.0).max().unwrap_or(0).max(0);
    // exit states: lower − max_dn .. lower − 1 and upper + 1 .. upper + max_up
    let exits: Vec<i64> = (lower - max_dn..lower).chain(upper + 1..=upper + max_up).collect();
    let m = exits.len();
    // (I − P) U = B, U[i][e] = P_i(exit at e)
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; m]; n];
    for i in 0..n {
        a[i][i] += 1.0;
        let y = lower + i as i64;
        for &(d, p) in &lat.steps {
            let z = y + d;
            if z < lower || z > upper {
                let e = exits.iter().position(|q| *q == z).expect("exit state");
                b[i][e] += p;
            } else {
                a[i][(z - lower) as usize] -= p;
            }
        }
    }
    let u = solve(a, b)?;
    let row = &u[(start - lower) as usize];
    Ok(exits.iter().copied().zip(row.iter().copied()).collect())
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, OracleError> {
    let n = a.len();
    for c in 0..n {
        let piv = (c..n).max_by(|i, j| a[*i][c].abs().total_cmp(&a[*j][c].abs())).expect("nonempty");
        if a[piv][c].abs() < 1e-300 {
            return Err(OracleError::Invalid("singular exit system".into()));
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f == 0.0 {
                continue;
            }
            let (top, bottom) = a.split_at_mut(r);
            for (t, p) in bottom[0][c..].iter_mut().zip(&top[c][c..]) {
                *t -= f * p;
            }
            let (top, bottom) = b.split_at_mut(r);
            for (t, p) in bottom[0].iter_mut().zip(&top[c]) {
                *t -= f * p;
            }
        }
    }
    for c in (0..n).rev() {
        for k in 0..b[c].len() {
            let mut s = b[c][k];
            for j in c + 1..n {
                s -= a[c][j] * b[j][k];
            }
            b[c][k] = s / a[c][c];
        }
    }
    Ok(b)
}

/// Exact lattice dynamic programming.
pub fn enumerate_walk_functional(
    walk: &TiltedWalk,
    x: f64,
    functional: WalkFunctional,
) -> Result<WalkOracleValue, OracleError> {
    let lat = lattice(walk)?;
    let h = lat.h;
    // positions are x + k h; barrier 0 sits between indices
    let lower = (-x / h).ceil() as i64;
    let lower = if x + lower as f64 * h < 0.0 { lower + 1 } else { lower };
    let pos = |k: i64| x + k as f64 * h;
    let top = |c: f64| ((c - x) / h).floor() as i64;
    if x < 0.0 {
        return Err(OracleError::Invalid("x must be >= 0".into()));
    }
    let lundberg = walk.lundberg_exponent();
    match functional {
        WalkFunctional::Passage { t } => {
            if x > t {
                return Ok(WalkOracleValue { value: 1.0, error_bound: 0.0 });
            }
            let law = exit_law(&lat, 0, lower, top(t))?;
            let value = law.iter().filter(|(k, _)| pos(*k) > t).map(|(_, p)| p).sum();
            Ok(WalkOracleValue { value, error_bound: 1e-12 })
        }
        WalkFunctional::Escape { cutoff } => {
            let law = exit_law(&lat, 0, lower, top(cutoff))?;
            let above: f64 = law.iter().filter(|(k, _)| pos(*k) > cutoff).map(|(_, p)| p).sum();
            // from above the cutoff the walk still returns below 0 w.p. ≤ e^{−θ cutoff}
            let leak = lundberg.map(|th| (-th * cutoff).exp()).unwrap_or(1.0);
            Ok(WalkOracleValue { value: above, error_bound: above * leak + 1e-12 })
        }
        WalkFunctional::UndershootLaplace { s, cutoff } => {
            undershoot(&lat, lower, top(cutoff), &pos, |v| (-s * v).exp())
        }
        WalkFunctional::UndershootMean { cutoff } => undershoot(&lat, lower, top(cutoff), &pos, |v| -v),
        WalkFunctional::StayNonnegative { horizon } => {
            let dist = killed_distribution(&lat, lower, horizon);
            Ok(WalkOracleValue { value: dist.values().sum(), error_bound: 1e-12 })
        }
        WalkFunctional::KilledLaplace { s, n } => {
            let dist = killed_distribution(&lat, lower, n);
            let mut acc = KahanSum::new();
            for (k, p) in dist {
                acc.add(p * (-s * pos(k)).exp());
            }
            Ok(WalkOracleValue { value: acc.value(), error_bound: 1e-12 })
        }
    }
}

/// `E[f(S_{τ_0⁻}); exit below]` on `[0, cutoff]`; walks leaving above the
/// cutoff are bounded by the largest `|f|` over possible undershoots.
fn undershoot(
    lat: &Lattice,
    lower: i64,
    upper: i64,
    pos: &dyn Fn(i64) -> f64,
    f: impl Fn(f64) -> f64,
) -> Result<WalkOracleValue, OracleError> {
    let law = exit_law(lat, 0, lower, upper)?;
    let mut acc = KahanSum::new();
    let mut above = 0.0;
    let mut worst = 0.0f64;
    for (k, p) in law {
        let v = pos(k);
        if v < 0.0 {
            acc.add(p * f(v));
            worst = worst.max(f(v).abs());
        } else {
            above += p;
        }
    }
    Ok(WalkOracleValue { value: acc.value(), error_bound: above * worst + 1e-12 })
}

/// Law of `S_n` on `{S_k ≥ 0, k ≤ n}`, keyed by lattice index.
fn killed_distribution(lat: &Lattice, lower: i64, n: usize) -> BTreeMap<i64, f64> {
    let mut cur = BTreeMap::new();
    if lower <= 0 {
        cur.insert(0i64, 1.0);
    }
    for _ in 0..n {
        let mut next = BTreeMap::new();
        for (&k, &p) in &cur {
            for &(d, q) in &lat.steps {
                if k + d >= lower {
                    *next.entry(k + d).or_insert(0.0) += p * q;
                }
            }
        }
        cur = next;
    }
    cur
}
