//! Small descriptive statistics used by the experiment harnesses.

use rand::Rng;

use crate::error::{Result, SaferError};
use crate::seeds::rng_from;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    sample_sd(xs) / (xs.len() as f64).sqrt()
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

/// Percentile interval of a bootstrap distribution at level `1 - alpha`.
pub fn percentile_interval(mut draws: Vec<f64>, alpha: f64) -> (f64, f64) {
    draws.sort_by(f64::total_cmp);
    (quantile_sorted(&draws, alpha / 2.0), quantile_sorted(&draws, 1.0 - alpha / 2.0))
}

/// 95% percentile-bootstrap interval for the mean of `xs`.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if xs.is_empty() || resamples == 0 {
        return Err(SaferError::InsufficientData("bootstrap needs data and at least one resample".into()));
    }
    let mut rng = rng_from(seed);
    let n = xs.len();
    let draws = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(percentile_interval(draws, 0.05))
}

/// Welch two-sample t statistic.
pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let va = sample_sd(a).powi(2) / a.len() as f64;
    let vb = sample_sd(b).powi(2) / b.len() as f64;
    (mean(a) - mean(b)) / (va + vb).sqrt()
}
