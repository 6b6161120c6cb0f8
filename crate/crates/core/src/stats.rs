//! Latency quantiles and windowed throughput.

use alloc::vec::Vec;

/// Quantile `q` in `[0, 1]` of already sorted samples, interpolating linearly
/// between the two closest ranks. Returns 0 for no samples.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencyQuantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl LatencyQuantiles {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut sorted: Vec<f64> = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            p50: quantile_sorted(&sorted, 0.50),
            p90: quantile_sorted(&sorted, 0.90),
            p99: quantile_sorted(&sorted, 0.99),
        }
    }
}

/// `count / window`, 0 for an empty or zero-length window.
pub fn rate(count: f64, window_secs: f64) -> f64 {
    if window_secs > 0.0 {
        count / window_secs
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.5), 50.5);
        let q = LatencyQuantiles::from_samples(&xs);
        assert!((q.p90 - 90.1).abs() < 1e-9);
        assert!((q.p99 - 99.01).abs() < 1e-9);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(LatencyQuantiles::from_samples(&[]), LatencyQuantiles::default());
        assert_eq!(rate(5.0, 0.0), 0.0);
    }

    #[test]
    fn rate_per_window() {
        assert_eq!(rate(60.0, 60.0), 1.0);
    }
}
