//! Order statistics used by the reporting layer: medians, percentile
//! bootstrap intervals for the median, and a least-squares trend check.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Median by quickselect; O(n), no full sort. Even lengths average the two
/// middle order statistics.
pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("median samples"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("median samples".into()));
    }
    let mut v = samples.to_vec();
    let k = v.len() / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    if v.len() % 2 == 1 {
        return Ok(upper);
    }
    // the left partition holds the k smallest values; its max is the lower
    // middle order statistic
    let lower = v[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}

/// Linear-interpolation quantile of an already sorted slice.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the median: resample with replacement
/// `n_resamples` times, take each resample's median, report the central
/// `level` quantile range. Deterministic for a fixed seed.
pub fn bootstrap_median_ci(
    samples: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("bootstrap samples"));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidConfig("n_resamples must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let mut rng = rng_for(seed, "bootstrap-median");
    let n = samples.len();
    let mut resample = vec![0.0; n];
    let mut medians = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        for slot in &mut resample {
            *slot = samples[rng.gen_range(0..n)];
        }
        medians.push(median(&resample)?);
    }
    medians.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((
        sorted_quantile(&medians, tail),
        sorted_quantile(&medians, 1.0 - tail),
    ))
}

/// Default bootstrap shape used throughout the harness.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

/// OLS slope of `ys` against index, with a 95% normal-theory confidence
/// interval. Used to check that a control condition has no reward trend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendReport {
    pub slope: f64,
    pub ci: (f64, f64),
}

impl TrendReport {
    pub fn contains_zero(&self) -> bool {
        self.ci.0 <= 0.0 && 0.0 <= self.ci.1
    }
}

pub fn slope_trend(ys: &[f64]) -> Result<TrendReport> {
    if ys.len() < 3 {
        return Err(Error::EmptyInput("trend samples"));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::NonFinite("trend samples".into()));
    }
    let n = ys.len() as f64;
    let x_mean = (ys.len() - 1) as f64 / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let sse: f64 = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let r = y - (intercept + slope * i as f64);
            r * r
        })
        .sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let half = 1.96 * se;
    Ok(TrendReport {
        slope,
        ci: (slope - half, slope + half),
    })
}
