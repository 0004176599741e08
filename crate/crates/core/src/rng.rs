//! Seeded randomness.
//!
//! Every draw in the crate goes through [`Rng`], a ChaCha8 generator keyed by
//! a 64-bit seed plus a 64-bit stream id. ChaCha is counter based, so two
//! generators with the same `(seed, stream)` produce the same sequence on
//! every platform, and different streams never overlap.
//!
//! Layer initialization draws weights before biases, row-major within each
//! tensor. Layers draw from their own streams (see `engine::seeds`), which
//! makes "shared initialization" mean "same seed and stream, same draws".

use rand::distr::Open01;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from the open interval `(lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let u: f64 = self.inner.sample(Open01);
            let v = lo + (hi - lo) * u;
            if v > lo && v < hi {
                return v;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Parameter("fan_in must be at least 1".into()));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Returns `w + eps` with `eps` i.i.d. `N(0, delta^2)`.
pub fn gaussian_perturb(w: &Tensor, rng: &mut Rng, delta: f64) -> Result<Tensor> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!(
            "perturbation scale must be finite and non-negative, got {delta}"
        )));
    }
    if delta == 0.0 {
        return Ok(w.clone());
    }
    let data = w.data().iter().map(|&v| v + delta * rng.standard_normal()).collect();
    let out = Tensor::from_parts(w.shape().to_vec(), data);
    out.ensure_finite("gaussian_perturb")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::with_stream(42, 7);
        let mut b = Rng::with_stream(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(42, 8);
        let mut a = Rng::with_stream(42, 7);
        let same = (0..16).filter(|_| a.next_u64() == c.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_init_bounds() {
        let mut rng = Rng::new(1);
        let t = uniform_init(&mut rng, 784, &[256, 784]).unwrap();
        let bound: f64 = 1.0 / 28.0;
        assert!((bound - 0.0357).abs() < 1e-4);
        assert!(t.data().iter().all(|v| v.abs() < bound));

        let t = uniform_init(&mut rng, 1, &[1000]).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn uniform_init_variance() {
        let mut rng = Rng::new(2);
        let t = uniform_init(&mut rng, 256, &[100_000]).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = (1.0 / 3.0) * (1.0 / 256.0);
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn uniform_init_rejects_zero_fan_in() {
        let mut rng = Rng::new(0);
        assert!(matches!(uniform_init(&mut rng, 0, &[2]), Err(Error::Parameter(_))));
    }

    #[test]
    fn perturb_zero_is_identity() {
        let mut rng = Rng::new(3);
        let w = uniform_init(&mut rng, 4, &[3, 4]).unwrap();
        assert_eq!(gaussian_perturb(&w, &mut rng, 0.0).unwrap(), w);
    }

    #[test]
    fn perturb_half_normal_mean() {
        let mut rng = Rng::new(4);
        let w = Tensor::zeros(&[100_000]);
        let out = gaussian_perturb(&w, &mut rng, 0.1).unwrap();
        let mean_abs = out.data().iter().map(|v| v.abs()).sum::<f64>() / out.len() as f64;
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_abs / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn perturb_is_deterministic_and_validates() {
        let w = Tensor::zeros(&[50]);
        let a = gaussian_perturb(&w, &mut Rng::new(9), 0.3).unwrap();
        let b = gaussian_perturb(&w, &mut Rng::new(9), 0.3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            gaussian_perturb(&w, &mut Rng::new(9), -0.1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(5);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
