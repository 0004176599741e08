use subliminal::nn::{ArchSpec, ModelSpec, SplitHeadModel};
use subliminal::rng::{uniform_init, Rng};
use subliminal::theory::{aux_projection_diagnostics, estimate_v, mean_square, permutation_chance_oracle};
use subliminal::Tensor;

fn random_latents(rows: usize, d: usize, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let data = (0..rows * d).map(|_| rng.uniform(0.0, 1.0)).collect();
    let labels = (0..rows).map(|i| i % n).collect();
    (Tensor::new(vec![rows, d], data).unwrap(), labels)
}

#[test]
fn random_heads_sit_at_chance() {
    for (n, tol) in [(2usize, 0.02), (5, 0.015), (10, 0.01)] {
        let (z, labels) = random_latents(200, 16, n, n as u64);
        let trials = 10_000;
        let (mean, accs) = permutation_chance_oracle(&z, &labels, n, &mut Rng::new(7), trials).unwrap();
        let sd = {
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            var.sqrt() / (trials as f64).sqrt()
        };
        let expect = 1.0 / n as f64;
        assert!((mean - expect).abs() < tol, "n={n}: {mean}");
        assert!(
            (mean - expect).abs() < 3.0 * sd + 1e-3,
            "n={n}: {mean} vs {expect} (mc err {sd})"
        );
    }
}

/// Exact expected accuracy of a uniformly random relabelling: the mean
/// number of fixed points of a permutation of n items, divided by n.
fn permutation_fixed_point_rate(n: usize) -> f64 {
    fn perms(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            perms(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let mut all = Vec::new();
    perms(&mut (0..n).collect(), 0, &mut all);
    let fixed: usize = all
        .iter()
        .map(|p| p.iter().enumerate().filter(|(i, v)| i == *v).count())
        .sum();
    fixed as f64 / (all.len() * n) as f64
}

#[test]
fn clustered_latents_follow_the_permutation_count() {
    for n in 2..=5 {
        assert!((permutation_fixed_point_rate(n) - 1.0 / n as f64).abs() < 1e-15);
        // One well-separated cluster per class: each random head induces a
        // class -> class map, so accuracies are multiples of 1/n.
        let d = 8;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n {
            for _ in 0..5 {
                let mut v = vec![0.0; d];
                v[c] = 3.0;
                data.extend(v);
                labels.push(c);
            }
        }
        let z = Tensor::new(vec![5 * n, d], data).unwrap();
        let (mean, accs) = permutation_chance_oracle(&z, &labels, n, &mut Rng::new(n as u64), 20_000).unwrap();
        assert!((mean - 1.0 / n as f64).abs() < 0.015, "n={n}: {mean}");
        for a in &accs {
            let k = a * n as f64;
            assert!((k - k.round()).abs() < 1e-9);
        }
        assert!(
            accs.iter().any(|&a| a >= 2.0 / n as f64 - 1e-12),
            "some trial reaches k/n with k >= 2"
        );
    }
}

#[test]
fn uniform_aux_rows_have_beta_one_third_and_shrinking_cosines() {
    let mut last = f64::INFINITY;
    for d in [64usize, 256, 1024] {
        let w = uniform_init(&mut Rng::new(d as u64), d, &[10, d]).unwrap();
        let (beta, max_cos) = aux_projection_diagnostics(&w).unwrap();
        if d == 256 {
            assert!((beta - 1.0 / 3.0).abs() < 0.1 / 3.0, "beta {beta}");
        }
        assert!(max_cos < last, "d={d}: {max_cos}");
        // about sqrt(2 ln(#pairs) / d)
        assert!(max_cos * (d as f64).sqrt() < 4.0);
        last = max_cos;
    }
}

#[test]
fn v_matches_a_loop_oracle() {
    let spec = ModelSpec {
        arch: ArchSpec::mlp(&[7, 5]),
        input_shape: [1, 4, 4],
        n_classes: 3,
        aux_dim: 2,
    };
    let model = SplitHeadModel::init(&spec, |id| Rng::with_stream(1, id.stream_index())).unwrap();
    let mut rng = Rng::new(3);
    let x = Tensor::new(vec![3000, 16], (0..3000 * 16).map(|_| rng.standard_normal()).collect()).unwrap();
    let v = estimate_v(&model, &x).unwrap();
    let z = model.latent(&x).unwrap();
    let mut sum = 0.0;
    for value in z.data() {
        sum += value * value;
    }
    assert!((v - sum / z.len() as f64).abs() < 1e-12);
    assert_eq!(mean_square(&Tensor::zeros(&[4, 3])), 0.0);
    assert!((mean_square(&Tensor::filled(&[4, 3], 0.7)) - 0.49).abs() < 1e-15);
}
