//! Small statistics helpers for the Monte Carlo checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_error: f64::NAN, count: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_error: (var / n as f64).sqrt(), count: n }
    }

    /// `|mean - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.std_error
    }
}

/// Kolmogorov distribution tail `P(K > λ)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let p_value = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
    KsResult { statistic: d, p_value }
}

pub fn ks_exponential(samples: &[f64], mean: f64) -> KsResult {
    ks_test(samples, |x| if x <= 0.0 { 0.0 } else { 1.0 - (-x / mean).exp() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson χ² of observed counts against expected probabilities. Bins with
/// expected count below `min_expected` are pooled into one.
pub fn chi_square(observed: &[u64], probabilities: &[f64], min_expected: f64) -> ChiSquareResult {
    let total: u64 = observed.iter().sum();
    let n = total as f64;
    let mass: f64 = probabilities.iter().sum();
    let mut stat = 0.0;
    let mut bins = 0usize;
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(probabilities) {
        let e = n * p / mass;
        if e < min_expected {
            pooled_o += *o as f64;
            pooled_e += e;
            continue;
        }
        stat += (*o as f64 - e).powi(2) / e;
        bins += 1;
    }
    if pooled_e >= min_expected {
        stat += (pooled_o - pooled_e).powi(2) / pooled_e;
        bins += 1;
    }
    let dof = bins.saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64).map(|d| 1.0 - d.cdf(stat)).unwrap_or(f64::NAN);
    ChiSquareResult { statistic: stat, dof, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_quantiles() {
        // tabulated critical values of the limiting distribution
        assert!((kolmogorov_tail(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_tail(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn uniform_grid_passes_ks() {
        let xs: Vec<f64> = (0..1000).map(|i| -(1.0 - (i as f64 + 0.5) / 1000.0).ln() * 2.0).collect();
        let r = ks_exponential(&xs, 2.0);
        assert!(r.statistic < 1e-3 && r.p_value > 0.99);
        let bad = ks_exponential(&xs, 3.0);
        assert!(bad.p_value < 1e-6);
    }

    #[test]
    fn chi_square_exact_counts() {
        let r = chi_square(&[25, 25, 50], &[0.25, 0.25, 0.5], 5.0);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.dof, 2);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square(&[40, 10, 50], &[0.25, 0.25, 0.5], 5.0);
        // (15²/25)·2 = 18 on 2 dof
        assert!((r.statistic - 18.0).abs() < 1e-12);
        assert!((r.p_value - (-9.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn mean_estimate() {
        let m = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
