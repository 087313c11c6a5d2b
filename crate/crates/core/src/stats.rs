//! Statistical checks on leaf-label sequences.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::block::PathId;
use crate::error::{OramError, Result};

/// Significance level used by every uniformity and two-sample check.
pub const SIGNIFICANCE: f64 = 0.01;

/// Shortest sequence `obliviousness_report` accepts.
pub const MIN_REPORT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl TestResult {
    pub fn rejects(&self) -> bool {
        self.p_value <= SIGNIFICANCE
    }
}

/// Pearson chi-square of `counts` against equal expected frequencies.
pub fn chi_square_uniform(counts: &[u64]) -> Result<TestResult> {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return Err(OramError::Statistics(
            "chi-square needs at least two bins and one sample".into(),
        ));
    }
    let expected = total as f64 / counts.len() as f64;
    let statistic: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64)
        .map_err(|e| OramError::Statistics(e.to_string()))?;
    Ok(TestResult {
        statistic,
        p_value: dist.sf(statistic),
    })
}

pub fn histogram(values: impl IntoIterator<Item = u64>, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for v in values {
        counts[v as usize] += 1;
    }
    counts
}

/// Kolmogorov limiting distribution, P(K > lambda).
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(OramError::Statistics("KS test needs two non-empty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf((ne + 0.12 + 0.11 / ne) * d),
    })
}

/// Lag-1 sample autocorrelation. Zero for constant input.
pub fn serial_correlation(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObliviousnessReport {
    pub samples: usize,
    pub chi2: f64,
    pub p_value: f64,
    pub serial_correlation: f64,
}

impl ObliviousnessReport {
    pub fn uniform(&self) -> bool {
        self.p_value > SIGNIFICANCE
    }
}

/// Uniformity over the `2^height` leaves and lag-1 correlation of labels.
pub fn obliviousness_report(leaves: &[PathId], height: u32) -> Result<ObliviousnessReport> {
    if leaves.len() < MIN_REPORT_SAMPLES {
        return Err(OramError::Statistics(format!(
            "{} samples, need at least {MIN_REPORT_SAMPLES}",
            leaves.len()
        )));
    }
    let bins = 1usize << height;
    if let Some(bad) = leaves.iter().find(|l| l.0 as usize >= bins) {
        return Err(OramError::LabelOutOfRange {
            label: bad.0,
            height,
        });
    }
    let chi = chi_square_uniform(&histogram(leaves.iter().map(|l| l.0 as u64), bins))?;
    let xs: Vec<f64> = leaves.iter().map(|l| l.0 as f64).collect();
    Ok(ObliviousnessReport {
        samples: leaves.len(),
        chi2: chi.statistic,
        p_value: chi.p_value,
        serial_correlation: serial_correlation(&xs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chi_square_known_value() {
        // Counts 10, 20, 30 against 20 each: (100 + 0 + 100) / 20 = 10 on
        // 2 degrees of freedom, whose survival function is exp(-5).
        let r = chi_square_uniform(&[10, 20, 30]).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        assert!((r.p_value - (-5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn seeded_uniform_passes_and_constant_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let leaves: Vec<PathId> = (0..10_000).map(|_| PathId(rng.gen_range(0..128))).collect();
        let r = obliviousness_report(&leaves, 7).unwrap();
        assert!(r.uniform(), "{r:?}");
        assert!(r.serial_correlation.abs() < 0.05);
        let constant = vec![PathId(3); 10_000];
        let r = obliviousness_report(&constant, 7).unwrap();
        assert!(r.p_value < 1e-12);
        assert!(obliviousness_report(&constant[..999], 7).is_err());
    }

    #[test]
    fn ks_same_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>()).collect();
        assert!(!ks_two_sample(&a, &b).unwrap().rejects());
        let c: Vec<f64> = b.iter().map(|x| x + 0.1).collect();
        assert!(ks_two_sample(&a, &c).unwrap().rejects());
        let d = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(d.statistic, 0.0);
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // P(K > 1.36) is about 0.049 and P(K > 1.63) about 0.010.
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_sf(1.63) - 0.0098).abs() < 1e-3);
    }

    #[test]
    fn serial_correlation_of_alternating_sequence() {
        let xs: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        assert!((serial_correlation(&xs) + 1.0).abs() < 0.01);
        assert_eq!(serial_correlation(&[2.0; 10]), 0.0);
    }
}
