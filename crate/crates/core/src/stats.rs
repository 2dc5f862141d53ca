//! Summary statistics in the style of latency tables: mean, sample standard
//! deviation, k-sigma bands and linearly interpolated percentiles.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryMetrics {
    pub count: usize,
    pub mean: f64,
    /// Standard deviation with the n-1 denominator.
    pub sample_sigma: f64,
    /// Half-widths of the 1, 2 and 3 sigma bands around the mean.
    pub sigma_bands: [f64; 3],
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Percentile of sorted data, interpolating linearly between closest ranks
/// (rank = p * (n - 1)).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let p = p.clamp(0.0, 1.0);
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn compute_stats(samples: &[f64]) -> Result<SummaryMetrics, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples(samples.len()));
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(StatsError::NonFinite { index, value });
    }
    let n = samples.len() as f64;
    let mean = compensated_sum(samples.iter().copied()) / n;
    let var = compensated_sum(samples.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    let sigma = var.sqrt();

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    Ok(SummaryMetrics {
        count: samples.len(),
        mean,
        sample_sigma: sigma,
        sigma_bands: [sigma, 2.0 * sigma, 3.0 * sigma],
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        p50: percentile(&sorted, 0.50),
        p95: percentile(&sorted, 0.95),
        p99: percentile(&sorted, 0.99),
    })
}

impl SummaryMetrics {
    /// Relative error of the mean against an expected value.
    pub fn mean_rel_err(&self, expected: f64) -> f64 {
        ((self.mean - expected) / expected).abs()
    }

    pub fn sigma_rel_err(&self, expected: f64) -> f64 {
        ((self.sample_sigma - expected) / expected).abs()
    }
}

impl fmt::Display for SummaryMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} mean={:.3} sigma={:.3} [1s {:.3} | 2s {:.3} | 3s {:.3}] min={:.3} p50={:.3} p95={:.3} p99={:.3} max={:.3}",
            self.count,
            self.mean,
            self.sample_sigma,
            self.sigma_bands[0],
            self.sigma_bands[1],
            self.sigma_bands[2],
            self.min,
            self.p50,
            self.p95,
            self.p99,
            self.max
        )
    }
}
