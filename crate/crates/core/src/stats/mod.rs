//! Estimates with standard errors, mergeable accumulators and tests.

use serde::{Deserialize, Serialize};

use crate::replica::SEED_SCHEDULE;

mod constants;
mod convolution;
mod survival;
mod yaglom;

pub use constants::*;
pub use convolution::*;
pub use survival::*;
pub use yaglom::*;

/// A Monte Carlo estimate with its standard error and truncation accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub value: f64,
    pub stderr: f64,
    pub n_effective: f64,
    pub replicas: u64,
    pub truncated: u64,
    pub truncated_fraction: f64,
    pub seed_schedule_id: String,
}

impl EstimateWithCI {
    /// `replicas` counts every attempted replica, `truncated` those that hit a cap.
    pub fn new(value: f64, stderr: f64, n_effective: f64, replicas: u64, truncated: u64) -> Self {
        let total = replicas.max(truncated);
        Self {
            value,
            stderr: if stderr.is_finite() { stderr.max(0.0) } else { f64::INFINITY },
            n_effective: n_effective.min(replicas as f64),
            replicas: total,
            truncated,
            truncated_fraction: if total == 0 { 0.0 } else { truncated as f64 / total as f64 },
            seed_schedule_id: SEED_SCHEDULE.to_string(),
        }
    }

    /// A value known without sampling error.
    pub fn exact(value: f64) -> Self {
        let mut e = Self::new(value, 0.0, 0.0, 0, 0);
        e.seed_schedule_id = "exact".into();
        e
    }

    /// Mean of the kept replicas; `excluded` truncated replicas were dropped.
    pub fn from_mean(acc: &MeanAcc, excluded: u64) -> Self {
        Self::new(acc.mean(), acc.stderr(), acc.count() as f64, acc.count() + excluded, excluded)
    }

    /// `f(value)` with a first-order error `|f′(value)|·stderr`.
    pub fn map(&self, f: impl Fn(f64) -> f64, derivative: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.value = f(self.value);
        out.stderr = derivative(self.value).abs() * self.stderr;
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v, |_| c)
    }

    /// Lower and upper ends of the normal 95% interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - 1.96 * self.stderr, self.value + 1.96 * self.stderr)
    }

    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.value - target;
        if d == 0.0 {
            0.0
        } else {
            d.abs() / self.stderr
        }
    }

    pub fn within_se(&self, target: f64, k: f64) -> bool {
        self.z_score(target) <= k
    }

    /// Distance between two independent estimates in pooled standard errors.
    pub fn pooled_z(&self, other: &Self) -> f64 {
        let d = self.value - other.value;
        if d == 0.0 {
            return 0.0;
        }
        d.abs() / (self.stderr.powi(2) + other.stderr.powi(2)).sqrt()
    }

    pub fn relative_se(&self) -> f64 {
        self.stderr / self.value.abs()
    }
}

/// Welford mean/variance accumulator with an order-fixed merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAcc {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAcc {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &MeanAcc) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Mean of importance weights with effective sample size `(Σw)²/Σw²`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightAcc {
    pub moments: MeanAcc,
    sum: f64,
    sum_sq: f64,
}

impl WeightAcc {
    #[inline]
    pub fn push(&mut self, w: f64) {
        self.moments.push(w);
        self.sum += w;
        self.sum_sq += w * w;
    }

    pub fn merge(&mut self, o: &WeightAcc) {
        self.moments.merge(&o.moments);
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn effective_sample_size(&self) -> f64 {
        if self.sum_sq == 0.0 {
            0.0
        } else {
            self.sum * self.sum / self.sum_sq
        }
    }

    pub fn estimate(&self, truncated: u64) -> EstimateWithCI {
        let mut e = EstimateWithCI::from_mean(&self.moments, truncated);
        e.n_effective = self.effective_sample_size().min(self.moments.count() as f64);
        e
    }
}

/// Paired accumulator for E[X]/E[Y] with a delta-method standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RatioAcc {
    n: u64,
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl RatioAcc {
    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mx;
        let dy = y - self.my;
        self.mx += dx / n;
        self.my += dy / n;
        self.sxx += dx * (x - self.mx);
        self.syy += dy * (y - self.my);
        self.sxy += dx * (y - self.my);
    }

    pub fn merge(&mut self, o: &RatioAcc) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let dx = o.mx - self.mx;
        let dy = o.my - self.my;
        self.sxx += o.sxx + dx * dx * na * nb / n;
        self.syy += o.syy + dy * dy * na * nb / n;
        self.sxy += o.sxy + dx * dy * na * nb / n;
        self.mx += dx * nb / n;
        self.my += dy * nb / n;
        self.n += o.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean_x(&self) -> EstimateWithCI {
        let se = if self.n < 2 { f64::INFINITY } else { (self.sxx / (self.n - 1) as f64 / self.n as f64).sqrt() };
        EstimateWithCI::new(self.mx, se, self.n as f64, self.n, 0)
    }

    pub fn mean_y(&self) -> EstimateWithCI {
        let se = if self.n < 2 { f64::INFINITY } else { (self.syy / (self.n - 1) as f64 / self.n as f64).sqrt() };
        EstimateWithCI::new(self.my, se, self.n as f64, self.n, 0)
    }

    /// `(E[X] + a) / (b·E[Y])` with the delta-method error.
    pub fn ratio_affine(&self, a: f64, b: f64, truncated: u64) -> EstimateWithCI {
        let n = self.n as f64;
        let num = self.mx + a;
        let den = b * self.my;
        let r = num / den;
        let se = if self.n < 2 {
            f64::INFINITY
        } else {
            let (vx, vy, cxy) = (self.sxx / (n - 1.0), b * b * self.syy / (n - 1.0), b * self.sxy / (n - 1.0));
            ((vx - 2.0 * r * cxy + r * r * vy) / (den * den * n)).max(0.0).sqrt()
        };
        EstimateWithCI::new(r, se, n, self.n + truncated, truncated)
    }

    pub fn ratio(&self, truncated: u64) -> EstimateWithCI {
        self.ratio_affine(0.0, 1.0, truncated)
    }
}

/// Weighted least-squares nondecreasing fit (pool adjacent violators).
pub fn isotonic_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (v, w) in values.iter().zip(weights) {
        let w = if *w > 0.0 && w.is_finite() { *w } else { 1.0 };
        blocks.push((*v, w, 1));
        while blocks.len() > 1 {
            let (v2, w2, n2) = blocks[blocks.len() - 1];
            let (v1, w1, n1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, n1 + n2));
        }
    }
    blocks.into_iter().flat_map(|(v, _, n)| std::iter::repeat_n(v, n)).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Kolmogorov distribution tail `Q_KS(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sign = 2.0;
    let mut sum = 0.0;
    let mut prev = 0.0f64;
    for j in 1..=100 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev || term.abs() <= 1e-16 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n1 && j < n2 {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let p_value = if n1 == 0 || n2 == 0 {
        1.0
    } else {
        let en = ((n1 * n2) as f64 / (n1 + n2) as f64).sqrt();
        kolmogorov_q((en + 0.12 + 0.11 / en) * d)
    };
    KsResult { statistic: d, p_value, n1, n2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kolmogorov_tail_values() {
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_q(1.63) - 0.0098).abs() < 1e-3);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn ks_detects_shift_and_accepts_identity() {
        let a: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let same = ks_two_sample(&a, &a);
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        let r = ks_two_sample(&a, &shifted);
        assert!((r.statistic - 0.2).abs() <= 1e-3);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn ratio_delta_method_matches_independent_formula() {
        let mut acc = RatioAcc::default();
        let xs = [1.0, 2.0, 4.0, 3.0, 5.0];
        let ys = [2.0, 2.5, 3.0, 3.5, 4.0];
        for (x, y) in xs.iter().zip(ys) {
            acc.push(*x, y);
        }
        let r = acc.ratio(0);
        assert!((r.value - 3.0 / 3.0).abs() < 1e-12);
        // residual form: Var(X − rY)/(n·E[Y]²)
        let resid: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - r.value * y).collect();
        let m = resid.iter().sum::<f64>() / 5.0;
        let v = resid.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 4.0;
        assert!((r.stderr - (v / 5.0 / 9.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn isotonic_pools_violators() {
        let fit = isotonic_increasing(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4]);
        assert_eq!(fit, vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_increasing(&[1.0, 2.0], &[1.0, 1.0]), vec![1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn isotonic_output_is_monotone(xs in prop::collection::vec(-10f64..10.0, 1..60)) {
            let fit = isotonic_increasing(&xs, &vec![1.0; xs.len()]);
            prop_assert_eq!(fit.len(), xs.len());
            prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            let (a, b): (f64, f64) = (xs.iter().sum(), fit.iter().sum());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn welford_merge_matches_single_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
            let cut = cut.min(xs.len());
            let mut all = MeanAcc::new();
            xs.iter().for_each(|x| all.push(*x));
            let (mut a, mut b) = (MeanAcc::new(), MeanAcc::new());
            xs[..cut].iter().for_each(|x| a.push(*x));
            xs[cut..].iter().for_each(|x| b.push(*x));
            a.merge(&b);
            prop_assert!((a.mean() - all.mean()).abs() < 1e-9);
            prop_assert!((a.variance() - all.variance()).abs() < 1e-7 * (1.0 + all.variance()));
        }

        #[test]
        fn ratio_merge_matches_single_pass(pairs in prop::collection::vec((-10f64..10.0, 1f64..10.0), 3..100), cut in 0usize..100) {
            let cut = cut.min(pairs.len());
            let mut all = RatioAcc::default();
            pairs.iter().for_each(|(x, y)| all.push(*x, *y));
            let (mut a, mut b) = (RatioAcc::default(), RatioAcc::default());
            pairs[..cut].iter().for_each(|(x, y)| a.push(*x, *y));
            pairs[cut..].iter().for_each(|(x, y)| b.push(*x, *y));
            a.merge(&b);
            let (r1, r2) = (a.ratio(0), all.ratio(0));
            prop_assert!((r1.value - r2.value).abs() < 1e-9);
            prop_assert!((r1.stderr - r2.stderr).abs() < 1e-9);
        }

        #[test]
        fn ks_statistic_in_unit_interval(a in prop::collection::vec(-5f64..5.0, 1..50), b in prop::collection::vec(-5f64..5.0, 1..50)) {
            let r = ks_two_sample(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r.statistic));
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }
    }
}
