//! Student inputs: i.i.d. uniform pixel noise and 2-D Perlin noise.
//!
//! Noise is never normalized. Each batch is a pure function of the
//! generator it is handed; the engine derives one stream per batch index.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Uniform,
    Perlin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Lattice cells per image side (Perlin only).
    pub perlin_resolution: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Uniform,
            perlin_resolution: 8,
            batch_size: 1000,
            steps_per_epoch: 60,
        }
    }
}

impl NoiseSpec {
    /// Noise samples seen per student epoch.
    pub fn samples_per_epoch(&self) -> usize {
        self.batch_size * self.steps_per_epoch
    }

    /// One batch shaped `[B, C, H, W]` for `image_shape = [C, H, W]`.
    pub fn sample(&self, batch: usize, image_shape: [usize; 3], rng: &mut Rng) -> Result<Tensor> {
        let [c, h, w] = image_shape;
        let t = match self.kind {
            NoiseKind::Uniform => uniform_noise(batch, c * h * w, rng),
            NoiseKind::Perlin => {
                if c != 1 || h != w {
                    return Err(Error::Parameter(format!(
                        "Perlin noise needs square single-channel images, got {image_shape:?}"
                    )));
                }
                perlin_noise(batch, h, self.perlin_resolution, rng)?
            }
        };
        t.reshape(&[batch, c, h, w])
    }
}

/// `batch x dim` entries i.i.d. `U(-1, 1)`.
pub fn uniform_noise(batch: usize, dim: usize, rng: &mut Rng) -> Tensor {
    let data = (0..batch * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_parts(vec![batch, dim], data)
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One `side x side` Perlin image before rescaling.
///
/// Pixel `p` sits at lattice coordinate `p * resolution / side`; the
/// `(resolution + 1)^2` corner gradients are random unit vectors.
pub fn perlin_raw(side: usize, resolution: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if resolution < 1 {
        return Err(Error::Parameter("Perlin resolution must be at least 1".into()));
    }
    let lattice = resolution + 1;
    let grads: Vec<(f64, f64)> = (0..lattice * lattice)
        .map(|_| {
            let a = rng.uniform(0.0, 2.0 * PI);
            (a.cos(), a.sin())
        })
        .collect();
    let coord = |p: usize| {
        let u = (p * resolution) as f64 / side as f64;
        let cell = (u.floor() as usize).min(resolution - 1);
        (cell, u - cell as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        let (cy, fy) = coord(py);
        for px in 0..side {
            let (cx, fx) = coord(px);
            let corner = |dy: usize, dx: usize| {
                let (gx, gy) = grads[(cy + dy) * lattice + cx + dx];
                gx * (fx - dx as f64) + gy * (fy - dy as f64)
            };
            let (u, v) = (fade(fx), fade(fy));
            let top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0));
            let bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0));
            out.push(SQRT_2 * (top + v * (bottom - top)));
        }
    }
    Ok(out)
}

/// Affine map of `values` onto exactly `[-1, 1]`; a constant image maps to zeros.
pub fn rescale_unit(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { 2.0 * (*v - lo) / span - 1.0 } else { 0.0 };
    }
}

/// `batch x side*side` Perlin images, each rescaled to `[-1, 1]`.
pub fn perlin_noise(batch: usize, side: usize, resolution: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch * side * side);
    for _ in 0..batch {
        let mut img = perlin_raw(side, resolution, rng)?;
        rescale_unit(&mut img);
        data.extend(img);
    }
    Ok(Tensor::from_parts(vec![batch, side * side], data))
}

/// Mean absolute difference between horizontally adjacent pixels.
pub fn mean_horizontal_step(images: &Tensor, side: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for row in images.data().chunks_exact(side) {
        for w in row.windows(2) {
            total += (w[1] - w[0]).abs();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_bounds_and_moments() {
        let mut rng = Rng::new(0);
        let t = uniform_noise(1000, 1000, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01 / 3f64.sqrt());
        assert!((var * 3.0 - 1.0).abs() < 0.01);
        let next = uniform_noise(1000, 1000, &mut rng);
        assert_ne!(t, next);
    }

    #[test]
    fn lattice_corners_are_zero() {
        let img = perlin_raw(28, 4, &mut Rng::new(1)).unwrap();
        for y in (0..28).step_by(7) {
            for x in (0..28).step_by(7) {
                assert!(img[y * 28 + x].abs() < 1e-12);
            }
        }
        assert!(img.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn rescaled_range() {
        let t = perlin_noise(20, 28, 8, &mut Rng::new(2)).unwrap();
        for img in t.data().chunks_exact(784) {
            let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
        let mut flat = vec![0.3; 5];
        rescale_unit(&mut flat);
        assert_eq!(flat, vec![0.0; 5]);
        assert!(perlin_raw(28, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn spec_shapes_and_determinism() {
        let spec = NoiseSpec {
            kind: NoiseKind::Perlin,
            ..NoiseSpec::default()
        };
        assert_eq!(spec.samples_per_epoch(), 60_000);
        let a = spec.sample(3, [1, 28, 28], &mut Rng::with_stream(4, 9)).unwrap();
        let b = spec.sample(3, [1, 28, 28], &mut Rng::with_stream(4, 9)).unwrap();
        assert_eq!(a.shape(), &[3, 1, 28, 28]);
        assert_eq!(a, b);
    }
}
