use subliminal::engine::stats::{bootstrap_means, quantile_sorted};
use subliminal::noise::{mean_horizontal_step, perlin_noise, uniform_noise};
use subliminal::rng::Rng;

#[test]
fn lower_perlin_resolution_is_smoother() {
    let mut steps = Vec::new();
    for res in [1usize, 2, 4, 8, 14] {
        let imgs = perlin_noise(64, 28, res, &mut Rng::new(res as u64)).unwrap();
        steps.push(mean_horizontal_step(&imgs, 28));
    }
    let uniform = mean_horizontal_step(&uniform_noise(64, 784, &mut Rng::new(0)), 28);
    steps.push(uniform);
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
}

/// Twenty-line reference: resample with a different generator family.
fn reference_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng as _, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..values.len() {
                s += values[rng.random_range(0..values.len())];
            }
            s / values.len() as f64
        })
        .collect()
}

fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn bootstrap_matches_reference_resampler() {
    let values = [0.91, 0.93, 0.88, 0.95, 0.90, 0.87, 0.94, 0.92, 0.89, 0.96, 0.86, 0.93];
    let n = 10_000;
    let mut ours = bootstrap_means(&values, n, &mut Rng::new(5));
    let mut reference = reference_means(&values, n, 17);
    let d = ks_statistic(&mut ours, &mut reference);
    // Two-sample KS critical value at alpha = 0.001.
    let crit = 1.95 * ((2 * n) as f64 / (n * n) as f64).sqrt();
    assert!(d < crit, "KS {d} >= {crit}");
    let q = |v: &[f64], p| quantile_sorted(v, p);
    assert!((q(&ours, 0.025) - q(&reference, 0.025)).abs() < 0.003);
    assert!((q(&ours, 0.975) - q(&reference, 0.975)).abs() < 0.003);
}
