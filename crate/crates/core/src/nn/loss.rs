//! The two training objectives: cross-entropy on class logits (teacher) and
//! mean-squared error on aux outputs (student).

use super::{GradientSet, SplitHeadModel};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `logits` (`B x n`) against integer labels, with the
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (batch, n) = logits.dims2()?;
    if labels.len() != batch {
        return dim_err(
            "cross_entropy",
            format!("{} labels for a batch of {batch}", labels.len()),
        );
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Data(format!("label {bad} out of range for {n} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * n];
    let inv_b = 1.0 / batch as f64;
    for ((row, g), &label) in logits.data().chunks_exact(n).zip(grad.chunks_exact_mut(n)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, grad))
}

/// Mean over all `B * m` entries of `(pred - target)^2`, with its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return dim_err(
            "mse",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        );
    }
    let count = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / count
        })
        .collect();
    let loss = loss / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mse"));
    }
    Ok((loss, grad))
}

/// Cross-entropy loss on the class head and gradients for every trainable
/// layer. The aux head is off the loss path, so its gradient (if trainable)
/// is zero.
pub fn cross_entropy_backward(model: &SplitHeadModel, x: &Tensor, labels: &[usize]) -> Result<(f64, GradientSet)> {
    let (fwd, logits) = model.class_forward_traced(x)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    Ok((loss, model.backward(&fwd, Some(&dlogits), None)))
}

/// MSE between the model's aux outputs and `teacher_aux` (`B x m`). The class
/// head is off the loss path.
pub fn mse_aux_backward(model: &SplitHeadModel, x: &Tensor, teacher_aux: &Tensor) -> Result<(f64, GradientSet)> {
    let batch = x.shape().first().copied().unwrap_or(0);
    if teacher_aux.shape() != [batch, model.aux_dim()] {
        return dim_err(
            "mse_aux_backward",
            format!(
                "targets {:?}, expected [{batch}, {}]",
                teacher_aux.shape(),
                model.aux_dim()
            ),
        );
    }
    let (fwd, aux) = model.aux_forward_traced(x)?;
    let (loss, daux) = mse(&aux, teacher_aux)?;
    Ok((loss, model.backward(&fwd, None, Some(&daux))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, LayerId, ModelSpec};
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_give_ln_n() {
        let (loss, _) = cross_entropy(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let logits = Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-80);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mse_is_quadratic() {
        let t = Tensor::zeros(&[2, 2]);
        let p1 = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let p2 = p1.scale(2.0).unwrap();
        let (l1, _) = mse(&p1, &t).unwrap();
        let (l2, _) = mse(&p2, &t).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-15);
        assert_eq!(mse(&t, &t).unwrap().0, 0.0);
        assert!(mse(&t, &Tensor::zeros(&[2, 3])).is_err());
    }

    fn model() -> SplitHeadModel {
        let spec = ModelSpec {
            arch: ArchSpec::mlp(&[6, 5]),
            input_shape: [1, 2, 2],
            n_classes: 3,
            aux_dim: 2,
        };
        SplitHeadModel::init(&spec, |id| Rng::with_stream(5, id.stream_index())).unwrap()
    }

    #[test]
    fn heads_are_isolated() {
        let m = model();
        let x = Tensor::new(vec![2, 4], vec![0.5, -0.1, 0.3, 0.9, -0.4, 0.2, 0.8, 0.1]).unwrap();
        let (_, g) = cross_entropy_backward(&m, &x, &[0, 2]).unwrap();
        assert!(g.get(LayerId::AuxHead).unwrap().is_zero());
        assert!(!g.get(LayerId::ClassHead).unwrap().is_zero());

        let target = m.aux_outputs(&x).unwrap();
        let (loss, g) = mse_aux_backward(&m, &x, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|(_, p)| p.is_zero()));

        let shifted = target.add(&Tensor::filled(&[2, 2], 0.3)).unwrap();
        let (_, g) = mse_aux_backward(&m, &x, &shifted).unwrap();
        assert!(g.get(LayerId::ClassHead).unwrap().is_zero());
        assert!(!g.get(LayerId::AuxHead).unwrap().is_zero());
    }

    #[test]
    fn gradient_keys_follow_trainable_flags() {
        let mut m = model();
        m.set_trainable(LayerId::AuxHead, false);
        m.set_trainable(LayerId::Feature(0), false);
        let x = Tensor::filled(&[1, 4], 0.2);
        let target = Tensor::zeros(&[1, 2]);
        let (_, g) = mse_aux_backward(&m, &x, &target).unwrap();
        assert_eq!(
            g.keys().collect::<Vec<_>>(),
            vec![LayerId::Feature(1), LayerId::ClassHead]
        );
    }
}
