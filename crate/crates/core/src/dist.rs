//! Small discrete/continuous laws used by the models, plus compensated summation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Walker/Vose alias table over `0..n`.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Builds the table from non-negative weights (not necessarily normalized).
    ///
    /// Returns `None` when the weights are empty, contain a negative or
    /// non-finite entry, or sum to zero.
    pub fn new(weights: &[f64]) -> Option<Self> {
        let n = weights.len();
        if n == 0 || n > u32::MAX as usize {
            return None;
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return None;
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0u32; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
            alias[i] = i as u32;
        }
        Some(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.prob.len();
        if n == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let scaled = u * n as f64;
        let i = (scaled as usize).min(n - 1);
        let frac = scaled - i as f64;
        if frac < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}

/// Law of the offspring count ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CountLaw {
    Deterministic { value: u32 },
    Finite { values: Vec<u32>, probs: Vec<f64> },
}

impl CountLaw {
    /// Support points with their probabilities (zero-probability points dropped).
    pub fn pmf(&self) -> Vec<(u32, f64)> {
        match self {
            CountLaw::Deterministic { value } => vec![(*value, 1.0)],
            CountLaw::Finite { values, probs } => {
                values.iter().copied().zip(probs.iter().copied()).filter(|(_, p)| *p > 0.0).collect()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.pmf().iter().map(|(k, p)| *k as f64 * p).sum()
    }

    pub fn max_value(&self) -> u32 {
        self.pmf().iter().map(|(k, _)| *k).max().unwrap_or(0)
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if let CountLaw::Finite { values, probs } = self {
            check_probs(values.len(), probs)?;
        }
        Ok(())
    }

    /// The size-biased law k P(ν=k) / E[ν].
    pub fn size_biased(&self) -> Option<CountLaw> {
        let mean = self.mean();
        if mean <= 0.0 {
            return None;
        }
        let (values, probs): (Vec<u32>, Vec<f64>) =
            self.pmf().into_iter().filter(|(k, _)| *k > 0).map(|(k, p)| (k, k as f64 * p / mean)).unzip();
        Some(CountLaw::Finite { values, probs })
    }
}

/// Law of a single displacement X in the iid case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DisplacementLaw {
    TwoPoint { up: f64, p_up: f64, down: f64 },
    Finite { values: Vec<f64>, probs: Vec<f64> },
    Gaussian { mean: f64, sd: f64 },
}

impl DisplacementLaw {
    /// Finite support as (value, prob); `None` for continuous laws.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            DisplacementLaw::TwoPoint { up, p_up, down } => {
                Some(vec![(*up, *p_up), (*down, 1.0 - p_up)]).map(|v| v.into_iter().filter(|(_, p)| *p > 0.0).collect())
            }
            DisplacementLaw::Finite { values, probs } => {
                Some(values.iter().copied().zip(probs.iter().copied()).filter(|(_, p)| *p > 0.0).collect())
            }
            DisplacementLaw::Gaussian { .. } => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        match self {
            DisplacementLaw::TwoPoint { up, p_up, down } => {
                if !up.is_finite() || !down.is_finite() {
                    return Err("two_point values must be finite".into());
                }
                if !(0.0..=1.0).contains(p_up) {
                    return Err(format!("p_up = {p_up} is not a probability"));
                }
                Ok(())
            }
            DisplacementLaw::Finite { values, probs } => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err("finite displacement values must be finite".into());
                }
                check_probs(values.len(), probs)
            }
            DisplacementLaw::Gaussian { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || *sd <= 0.0 {
                    return Err(format!("gaussian needs finite mean and sd > 0, got ({mean}, {sd})"));
                }
                Ok(())
            }
        }
    }

    /// Whether the law charges (0, ∞).
    pub fn charges_positive(&self) -> bool {
        match self.atoms() {
            Some(atoms) => atoms.iter().any(|(v, _)| *v > 0.0),
            None => true,
        }
    }
}

pub(crate) fn check_probs(len: usize, probs: &[f64]) -> Result<(), String> {
    if len == 0 {
        return Err("empty support".into());
    }
    if probs.len() != len {
        return Err(format!("{} values but {} probabilities", len, probs.len()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let total = kahan_sum(probs.iter().copied());
    if (total - 1.0).abs() > 1e-12 {
        return Err(format!("probabilities sum to {total}, expected 1"));
    }
    Ok(())
}

/// Prepared sampler for a [`DisplacementLaw`].
#[derive(Debug, Clone)]
pub enum DisplacementSampler {
    TwoPoint { up: f64, down: f64, p_up: f64 },
    Atoms { values: Vec<f64>, table: AliasTable },
    Gaussian { mean: f64, sd: f64 },
}

impl DisplacementSampler {
    pub fn new(law: &DisplacementLaw) -> Self {
        match law {
            DisplacementLaw::TwoPoint { up, p_up, down } => {
                DisplacementSampler::TwoPoint { up: *up, down: *down, p_up: *p_up }
            }
            DisplacementLaw::Finite { .. } => {
                let atoms = law.atoms().unwrap_or_default();
                Self::from_atoms(&atoms)
            }
            DisplacementLaw::Gaussian { mean, sd } => DisplacementSampler::Gaussian { mean: *mean, sd: *sd },
        }
    }

    pub fn from_atoms(atoms: &[(f64, f64)]) -> Self {
        let values: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        let weights: Vec<f64> = atoms.iter().map(|a| a.1).collect();
        let table = AliasTable::new(&weights).expect("validated atom weights");
        DisplacementSampler::Atoms { values, table }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DisplacementSampler::TwoPoint { up, down, p_up } => {
                if rng.random::<f64>() < *p_up {
                    *up
                } else {
                    *down
                }
            }
            DisplacementSampler::Atoms { values, table } => values[table.sample(rng)],
            DisplacementSampler::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
        }
    }
}

/// Prepared sampler for a [`CountLaw`].
#[derive(Debug, Clone)]
pub enum CountSampler {
    Fixed(u32),
    Table { values: Vec<u32>, table: AliasTable },
}

impl CountSampler {
    pub fn new(law: &CountLaw) -> Self {
        let pmf = law.pmf();
        if pmf.len() == 1 {
            return CountSampler::Fixed(pmf[0].0);
        }
        let values = pmf.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = pmf.iter().map(|p| p.1).collect();
        CountSampler::Table { values, table: AliasTable::new(&weights).expect("validated count law") }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            CountSampler::Fixed(k) => *k,
            CountSampler::Table { values, table } => values[table.sample(rng)],
        }
    }
}

/// Kahan–Babuška compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// log Σ exp(x_i), stable for large magnitudes.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + kahan_sum(xs.into_iter().map(|x| (x - m).exp())).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alias_table_reproduces_weights() {
        let table = AliasTable::new(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        let n = 400_000;
        for _ in 0..n {
            counts[table.sample(&mut rng)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let p = (i + 1) as f64 / 10.0;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 5.0 * se, "bin {i}");
        }
    }

    #[test]
    fn alias_rejects_bad_weights() {
        assert!(AliasTable::new(&[]).is_none());
        assert!(AliasTable::new(&[0.0, 0.0]).is_none());
        assert!(AliasTable::new(&[1.0, -0.5]).is_none());
        assert!(AliasTable::new(&[f64::NAN]).is_none());
    }

    #[test]
    fn size_biased_count() {
        let law = CountLaw::Finite { values: vec![0, 1, 2], probs: vec![0.25, 0.25, 0.5] };
        let sb = law.size_biased().unwrap();
        let pmf = sb.pmf();
        assert_eq!(pmf.len(), 2);
        assert!((pmf[0].1 - 0.2).abs() < 1e-15);
        assert!((pmf[1].1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn kahan_beats_naive() {
        let xs = std::iter::once(1.0).chain(std::iter::repeat_n(1e-16, 1_000_000));
        assert!((kahan_sum(xs) - (1.0 + 1e-10)).abs() < 1e-15);
    }

    #[test]
    fn lse_matches_direct() {
        let xs = [0.1, -2.0, 3.5];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs) - direct).abs() < 1e-14);
        assert!(log_sum_exp([1000.0, 1000.0]).is_finite());
    }
}
