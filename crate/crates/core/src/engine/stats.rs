//! Seed-level summary statistics.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Percentile bootstrap of the mean: `(mean, lo, hi)`.
///
/// Resamples `values` with replacement `n_resamples` times and reads the
/// `(1 - level) / 2` and `(1 + level) / 2` quantiles of the resampled means
/// with linear interpolation between order statistics.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, level: f64, rng: &mut Rng) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Parameter(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter("need n_resamples >= 1 and level in (0, 1)".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bootstrap_ci"));
    }
    let mean = mean(values);
    let mut means = bootstrap_means(values, n_resamples, rng);
    means.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&means, (1.0 - level) / 2.0);
    let hi = quantile_sorted(&means, (1.0 + level) / 2.0);
    // Interpolation can land a hair outside [min, max] of a constant sample.
    Ok((mean, lo.min(mean), hi.max(mean)))
}

/// Means of `n_resamples` with-replacement resamples of `values`.
pub fn bootstrap_means(values: &[f64], n_resamples: usize, rng: &mut Rng) -> Vec<f64> {
    let n = values.len();
    (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    match sorted.get(i + 1) {
        Some(next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_collapse() {
        let (m, lo, hi) = bootstrap_ci(&[0.3; 7], 500, 0.95, &mut Rng::new(1)).unwrap();
        assert_eq!((m, lo, hi), (0.3, 0.3, 0.3));
    }

    #[test]
    fn symmetric_sample_brackets_mean() {
        let v: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let (m, lo, hi) = bootstrap_ci(&v, 10_000, 0.95, &mut Rng::new(2)).unwrap();
        assert_eq!(m, 0.5);
        assert!(lo < 0.5 && hi > 0.5);
        // Normal approximation: half-width about 1.96 * 0.5 / sqrt(20) = 0.219.
        assert!(((hi - lo) / 2.0 - 0.219).abs() < 0.03, "{lo} {hi}");
    }

    #[test]
    fn too_few_values() {
        assert!(matches!(
            bootstrap_ci(&[1.0], 10, 0.95, &mut Rng::new(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
