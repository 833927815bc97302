//! Survival tables of progeny and leaf counts, and tail fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EstimateWithCI;

/// Exceedance counts `#{value > n}` on a grid. Truncated replicas count as
/// exceedances only below their partial value; grid points at or above the
/// smallest truncated partial value are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalAcc {
    pub grid: Vec<u64>,
    pub exceed: Vec<u64>,
    pub n: u64,
    pub truncated: u64,
    pub min_truncated_value: Option<u64>,
}

impl SurvivalAcc {
    pub fn new(grid: &[u64]) -> Self {
        Self { grid: grid.to_vec(), exceed: vec![0; grid.len()], n: 0, truncated: 0, min_truncated_value: None }
    }

    pub fn push(&mut self, value: u64, truncated: bool) {
        self.n += 1;
        let k = self.grid.partition_point(|g| *g < value);
        for e in &mut self.exceed[..k] {
            *e += 1;
        }
        if truncated {
            self.truncated += 1;
            self.min_truncated_value = Some(self.min_truncated_value.map_or(value, |m| m.min(value)));
        }
    }

    pub fn merge(&mut self, o: &SurvivalAcc) {
        debug_assert_eq!(self.grid, o.grid);
        for (a, b) in self.exceed.iter_mut().zip(&o.exceed) {
            *a += b;
        }
        self.n += o.n;
        self.truncated += o.truncated;
        self.min_truncated_value = match (self.min_truncated_value, o.min_truncated_value) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }

    pub fn flagged(&self, i: usize) -> bool {
        self.min_truncated_value.is_some_and(|m| self.grid[i] >= m)
    }

    /// `P̂(value > grid[i])`, a lower bound at flagged points.
    pub fn survival(&self, i: usize) -> EstimateWithCI {
        let n = self.n.max(1) as f64;
        let p = self.exceed[i] as f64 / n;
        let se = if self.exceed[i] == 0 || self.exceed[i] == self.n { 1.0 / n } else { (p * (1.0 - p) / n).sqrt() };
        EstimateWithCI::new(p, se, n, self.n, self.truncated)
    }

    pub fn curve(&self) -> SurvivalCurve {
        SurvivalCurve {
            grid: self.grid.iter().map(|g| *g as f64).collect(),
            survival: (0..self.grid.len()).map(|i| self.survival(i)).collect(),
            exceedances: self.exceed.clone(),
            flagged: (0..self.grid.len()).map(|i| self.flagged(i)).collect(),
        }
    }
}

/// Joint progeny and leaf survival, with the coupling diagnostic
/// `P̂(#L[0] > (E[ν] − 1 + ε)n, Z ≤ n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSurvival {
    pub z: SurvivalAcc,
    pub leaves: SurvivalAcc,
    pub coupling: Vec<u64>,
    pub mean_offspring: f64,
    pub epsilon: f64,
}

impl TreeSurvival {
    pub fn new(grid: &[u64], mean_offspring: f64, epsilon: f64) -> Self {
        Self {
            z: SurvivalAcc::new(grid),
            leaves: SurvivalAcc::new(grid),
            coupling: vec![0; grid.len()],
            mean_offspring,
            epsilon,
        }
    }

    pub fn push(&mut self, z: u64, leaves: u64, truncated: bool) {
        self.z.push(z, truncated);
        self.leaves.push(leaves, truncated);
        if truncated {
            return;
        }
        let slope = self.mean_offspring - 1.0 + self.epsilon;
        for (i, n) in self.z.grid.iter().enumerate() {
            if z <= *n && leaves as f64 > slope * *n as f64 {
                self.coupling[i] += 1;
            }
        }
    }

    pub fn merge(&mut self, o: &TreeSurvival) {
        self.z.merge(&o.z);
        self.leaves.merge(&o.leaves);
        for (a, b) in self.coupling.iter_mut().zip(&o.coupling) {
            *a += b;
        }
    }

    /// Coupling count over progeny exceedances, per grid point.
    pub fn coupling_ratio(&self) -> Vec<f64> {
        self.coupling.iter().zip(&self.z.exceed).map(|(c, e)| *c as f64 / (*e).max(1) as f64).collect()
    }
}

/// A survival curve ready for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub grid: Vec<f64>,
    pub survival: Vec<EstimateWithCI>,
    pub exceedances: Vec<u64>,
    pub flagged: Vec<bool>,
}

impl SurvivalCurve {
    /// An exact curve, as if observed with `n` replicas.
    pub fn synthetic(grid: &[f64], f: impl Fn(f64) -> f64, n: u64) -> Self {
        let survival: Vec<EstimateWithCI> = grid
            .iter()
            .map(|g| {
                let p = f(*g);
                EstimateWithCI::new(p, (p * (1.0 - p) / n as f64).sqrt(), n as f64, n, 0)
            })
            .collect();
        Self {
            grid: grid.to_vec(),
            exceedances: survival.iter().map(|s| (s.value * n as f64).round() as u64).collect(),
            survival,
            flagged: vec![false; grid.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    SubcriticalSlope,
    CriticalPlateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFitReport {
    pub mode: TailMode,
    pub grid: Vec<f64>,
    pub survival: Vec<EstimateWithCI>,
    /// Slope of `log P̂` against `log n`, or the plateau level.
    pub fitted: EstimateWithCI,
    /// Reduced χ² of the slope fit, or the max/min ratio over the top decade.
    pub diagnostic: f64,
    /// `n (log n)² P̂(n)` per grid point (plateau mode).
    pub normalized: Vec<EstimateWithCI>,
    /// `−ϱ+/ϱ−` when given.
    pub reference: Option<f64>,
}

#[derive(Debug, Error)]
pub enum TailFitError {
    #[error("need >= {min_points} grid points with >= {min_exceed} exceedances; usable grid: {usable:?}")]
    Insufficient { min_points: usize, min_exceed: u64, usable: Vec<f64> },
}

pub const MIN_FIT_POINTS: usize = 4;
pub const MIN_EXCEEDANCES: u64 = 20;

/// Fits the tail of a survival curve restricted to `[lo, hi]`.
pub fn tail_fit(
    curve: &SurvivalCurve,
    mode: TailMode,
    range: (f64, f64),
    rho_ratio: Option<f64>,
) -> Result<TailFitReport, TailFitError> {
    let idx: Vec<usize> = (0..curve.grid.len())
        .filter(|&i| curve.grid[i] >= range.0 && curve.grid[i] <= range.1 && curve.grid[i] > 1.0)
        .collect();
    let usable: Vec<usize> =
        idx.iter().copied().filter(|&i| curve.exceedances[i] >= MIN_EXCEEDANCES && !curve.flagged[i]).collect();
    if usable.len() < MIN_FIT_POINTS {
        return Err(TailFitError::Insufficient {
            min_points: MIN_FIT_POINTS,
            min_exceed: MIN_EXCEEDANCES,
            usable: usable.iter().map(|&i| curve.grid[i]).collect(),
        });
    }
    let grid: Vec<f64> = usable.iter().map(|&i| curve.grid[i]).collect();
    let survival: Vec<EstimateWithCI> = usable.iter().map(|&i| curve.survival[i].clone()).collect();
    let normalized: Vec<EstimateWithCI> =
        grid.iter().zip(&survival).map(|(n, s)| s.scale(n * n.ln().powi(2))).collect();
    let (fitted, diagnostic) = match mode {
        TailMode::SubcriticalSlope => weighted_slope(&grid, &survival),
        TailMode::CriticalPlateau => plateau(&grid, &normalized),
    };
    Ok(TailFitReport { mode, grid, survival, fitted, diagnostic, normalized, reference: rho_ratio.map(|r| -r) })
}

/// Weighted least squares of `log p` on `log n` with weights `1/Var(log p̂)`.
fn weighted_slope(grid: &[f64], survival: &[EstimateWithCI]) -> (EstimateWithCI, f64) {
    let pts: Vec<(f64, f64, f64)> = grid
        .iter()
        .zip(survival)
        .map(|(n, s)| {
            let rel = s.stderr / s.value;
            (n.ln(), s.value.ln(), 1.0 / (rel * rel).max(1e-300))
        })
        .collect();
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let chi2: f64 = pts.iter().map(|p| p.2 * (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let dof = (pts.len() - 2).max(1) as f64;
    // the binomial points share replicas, so inflate by the fit's own misfit
    let se = (1.0 / sxx).sqrt() * (chi2 / dof).max(1.0).sqrt();
    let n_eff = survival.iter().map(|s| s.n_effective).fold(f64::INFINITY, f64::min);
    let replicas = survival[0].replicas;
    let truncated = survival[0].truncated;
    (EstimateWithCI::new(slope, se, n_eff, replicas, truncated), chi2 / dof)
}

/// Mean of the normalized sequence over the top half-decade, with the
/// max/min ratio over the top decade.
fn plateau(grid: &[f64], normalized: &[EstimateWithCI]) -> (EstimateWithCI, f64) {
    let top = *grid.last().expect("nonempty");
    let half: Vec<&EstimateWithCI> =
        grid.iter().zip(normalized).filter(|(n, _)| **n >= top / 10f64.sqrt() - 1e-9).map(|(_, e)| e).collect();
    let k = half.len() as f64;
    let value = half.iter().map(|e| e.value).sum::<f64>() / k;
    // neighbouring points are positively correlated; the largest SE bounds the mean's
    let se = half.iter().map(|e| e.stderr).fold(0.0, f64::max);
    let decade: Vec<f64> =
        grid.iter().zip(normalized).filter(|(n, _)| **n >= top / 10.0 - 1e-9).map(|(_, e)| e.value).collect();
    let max = decade.iter().copied().fold(f64::MIN, f64::max);
    let min = decade.iter().copied().fold(f64::MAX, f64::min);
    let n_eff = normalized.iter().map(|e| e.n_effective).fold(f64::INFINITY, f64::min);
    (EstimateWithCI::new(value, se, n_eff, normalized[0].replicas, normalized[0].truncated), max / min)
}

/// Geometric grid `2^k` covering `[lo, hi]`.
pub fn power_of_two_grid(lo: u64, hi: u64) -> Vec<u64> {
    let mut g = Vec::new();
    let mut n = 1u64;
    while n <= hi {
        if n >= lo {
            g.push(n);
        }
        n *= 2;
    }
    g
}

/// Distinct integers `⌈lo·10^{k/per_decade}⌉` up to `hi`.
pub fn log_grid(lo: u64, hi: u64, per_decade: u32) -> Vec<u64> {
    let mut g: Vec<u64> = Vec::new();
    for k in 0.. {
        let n = (lo as f64 * 10f64.powf(k as f64 / per_decade as f64)).round() as u64;
        if n > hi {
            break;
        }
        if g.last() != Some(&n) {
            g.push(n);
        }
    }
    g
}
