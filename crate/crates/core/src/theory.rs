//! Closed-form predictions for noise-only distillation and the small
//! analytic oracles used to check them.
//!
//! Symbols: `d` latent width, `m` aux width, `n` classes, `delta` Gaussian
//! perturbation scale, `beta` mean squared aux-row norm, `alpha` base error
//! rate, `s` logit calibration, `v` mean squared latent component.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SplitHeadModel;
use crate::rng::{uniform_init, Rng};
use crate::tensor::{argmax, cosine, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    pub beta: f64,
    pub alpha: f64,
    pub s: f64,
    pub v: f64,
}

impl TheoryInputs {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.d == 0 || self.m == 0 || self.n == 0 {
            return bad("d, m and n must be at least 1");
        }
        if !(self.delta >= 0.0 && self.beta >= 0.0 && self.v >= 0.0) {
            return bad("delta, beta and V must be non-negative");
        }
        if !(self.s > 0.0) {
            return bad("s must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0 - 1.0 / self.n as f64) {
            return bad("alpha must lie in (0, 1 - 1/n]");
        }
        Ok(())
    }
}

/// `r = sqrt(d) * delta / sqrt(beta)`.
pub fn shear_ratio(d: usize, delta: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::Parameter(format!("delta must be non-negative, got {delta}")));
    }
    Ok((d as f64).sqrt() * delta / beta.sqrt())
}

/// Expected update cosine once the aux head is sheared: `cos0 / sqrt(1 + r^2)`.
pub fn alignment_upper_bound(cos0: f64, r: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&cos0) {
        return Err(Error::Parameter(format!("cos0 must lie in [-1, 1], got {cos0}")));
    }
    Ok(cos0 / (1.0 + r * r).sqrt())
}

/// Predicted accuracy after adding `N(0, delta^2)` noise to the class head.
pub fn accuracy_under_class_perturbation(t: &TheoryInputs) -> Result<f64> {
    t.validate()?;
    if t.alpha >= 0.5 {
        return Err(Error::OutOfModel(format!(
            "alpha = {} leaves ln(1/alpha - 1) non-positive",
            t.alpha
        )));
    }
    let q = normal_quantile(t.alpha)?;
    let log_odds = (1.0 / t.alpha - 1.0).ln();
    let k = q * t.delta / (t.s * log_odds);
    Ok(normal_cdf(-q / (1.0 + 2.0 * t.d as f64 * t.v * k * k).sqrt()))
}

/// Mean of `z^2` over every latent component.
pub fn mean_square(latents: &Tensor) -> f64 {
    latents.data().iter().map(|z| z * z).sum::<f64>() / latents.len().max(1) as f64
}

/// `V` for a model over a set of inputs, evaluated in chunks.
pub fn estimate_v(model: &SplitHeadModel, images: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for_chunks(images, |x| {
        let z = model.latent(&x)?;
        total += z.data().iter().map(|v| v * v).sum::<f64>();
        count += z.len();
        Ok(())
    })?;
    Ok(total / count.max(1) as f64)
}

/// Calibration from class logits: returns `(s, alpha, mean top-2 margin)`.
pub fn calibration_from_logits(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64, f64)> {
    let (rows, n) = logits.dims2()?;
    if rows != labels.len() || rows == 0 || n < 2 {
        return Err(Error::Parameter(
            "need at least one row, matching labels and two classes".into(),
        ));
    }
    let mut errors = 0usize;
    let mut margin = 0.0;
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        let best = argmax(row);
        if best != label {
            errors += 1;
        }
        let runner_up = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        margin += row[best] - runner_up;
    }
    let alpha = errors as f64 / rows as f64;
    let margin = margin / rows as f64;
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::OutOfModel(format!("error rate {alpha} outside (0, 0.5)")));
    }
    Ok((margin / (1.0 / alpha - 1.0).ln(), alpha, margin))
}

/// `s` for a trained model on a labelled set.
pub fn estimate_calibration_s(model: &SplitHeadModel, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut parts = Vec::new();
    for_chunks(images, |x| {
        parts.extend_from_slice(model.class_logits(&x)?.data());
        Ok(())
    })?;
    let logits = Tensor::new(vec![labels.len(), model.n_classes()], parts)?;
    Ok(calibration_from_logits(&logits, labels)?.0)
}

fn for_chunks(images: &Tensor, mut f: impl FnMut(Tensor) -> Result<()>) -> Result<()> {
    let (rows, width) = images.dims2()?;
    for start in (0..rows).step_by(2048) {
        let end = (start + 2048).min(rows);
        let chunk = Tensor::new(
            vec![end - start, width],
            images.data()[start * width..end * width].to_vec(),
        )?;
        f(chunk)?;
    }
    Ok(())
}

/// Mean accuracy of freshly drawn random class heads on fixed latents.
/// Returns `(mean, per-trial accuracies)`.
pub fn permutation_chance_oracle(
    latents: &Tensor,
    labels: &[usize],
    n: usize,
    rng: &mut Rng,
    trials: usize,
) -> Result<(f64, Vec<f64>)> {
    let (rows, d) = latents.dims2()?;
    if trials == 0 || n == 0 || rows != labels.len() || rows == 0 {
        return Err(Error::Parameter(
            "need trials >= 1, n >= 1 and one label per latent".into(),
        ));
    }
    let mut accs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let w = uniform_init(rng, d, &[n, d])?;
        let b = uniform_init(rng, d, &[n])?;
        let mut correct = 0usize;
        let mut scores = vec![0.0; n];
        for (z, &label) in latents.data().chunks_exact(d).zip(labels) {
            for (k, s) in scores.iter_mut().enumerate() {
                *s = b.data()[k] + w.row(k).iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            }
            if argmax(&scores) == label {
                correct += 1;
            }
        }
        accs.push(correct as f64 / rows as f64);
    }
    Ok((accs.iter().sum::<f64>() / trials as f64, accs))
}

/// `(beta_hat, max |cosine|)` over the rows of an aux-head weight matrix.
pub fn aux_projection_diagnostics(weight: &Tensor) -> Result<(f64, f64)> {
    let (m, _) = weight.dims2()?;
    let beta = (0..m)
        .map(|i| weight.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / m.max(1) as f64;
    let mut max_cos: f64 = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            if let Some(c) = cosine(weight.row(i), weight.row(j)) {
                max_cos = max_cos.max(c.abs());
            }
        }
    }
    Ok((beta, max_cos))
}

/// `erf` by its power series `2/sqrt(pi) e^{-x^2} sum 2^n x^{2n+1} / (2n+1)!!`.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        k += 1.0;
        term *= 2.0 * x2 / (2.0 * k + 1.0);
        sum += term;
    }
    2.0 / PI.sqrt() * (-x2).exp() * sum
}

/// `erfc` for `x >= 3` by its continued fraction (modified Lentz).
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * PI.sqrt())
}

fn erfc_nonneg(x: f64) -> f64 {
    if x < 3.0 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs() / SQRT_2;
    let tail = 0.5 * erfc_nonneg(z);
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Standard normal quantile: rational initial guess refined by one Halley step.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("quantile needs p in (0, 1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let p_low = 0.02425;
    let mut x = if p < p_low {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - p_low {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    Ok(x)
}
