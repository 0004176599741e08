//! Adam with bias correction, applied only to trainable layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, LayerId, SplitHeadModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one model.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<LayerId, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. `grads` must be keyed exactly by the model's trainable
/// layers; frozen layers are never touched.
pub fn adam_step(model: &mut SplitHeadModel, grads: &GradientSet, state: &mut AdamState) -> Result<()> {
    let trainable = model.trainable_layers();
    if let Some(missing) = trainable.iter().find(|id| grads.get(**id).is_none()) {
        return Err(Error::Structural(format!("no gradient for trainable layer {missing}")));
    }
    if let Some(extra) = grads.keys().find(|id| !trainable.contains(id)) {
        return Err(Error::Structural(format!(
            "gradient supplied for frozen or unknown layer {extra}"
        )));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for id in trainable {
        let g = grads.get(id).expect("checked above");
        let (w, b) = model.params_mut(id).expect("trainable layer exists");
        if g.weight.shape() != w.shape() || g.bias.shape() != b.shape() {
            return Err(Error::Structural(format!("gradient shape mismatch for layer {id}")));
        }
        let n = w.len() + b.len();
        let mom = state.moments.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let params = w.data_mut().iter_mut().chain(b.data_mut().iter_mut());
        let gs = g.weight.data().iter().chain(g.bias.data());
        for (((p, &gi), m), v) in params.zip(gs).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
            let gi = gi + c.weight_decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
            *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        let (w, b) = model.params(id).expect("trainable layer exists");
        w.ensure_finite("adam_step")?;
        b.ensure_finite("adam_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, FeatureLayer, LinearLayer, ModelSpec, ParamGrad};
    use crate::tensor::Tensor;

    fn scalar_model(w0: f64) -> SplitHeadModel {
        let s = |v: f64, shape: &[usize]| Tensor::new(shape.to_vec(), vec![v]).unwrap();
        let spec = ModelSpec {
            arch: ArchSpec::mlp(&[1]),
            input_shape: [1, 1, 1],
            n_classes: 1,
            aux_dim: 1,
        };
        let mut m = SplitHeadModel::from_layers(
            spec,
            vec![FeatureLayer::Linear(
                LinearLayer::new(s(w0, &[1, 1]), s(0.0, &[1]), true).unwrap(),
            )],
            LinearLayer::new(s(1.0, &[1, 1]), s(0.0, &[1]), false).unwrap(),
            LinearLayer::new(s(1.0, &[1, 1]), s(0.0, &[1]), false).unwrap(),
        )
        .unwrap();
        m.set_trainable(LayerId::ClassHead, false);
        m
    }

    fn scalar_grad(g: f64) -> GradientSet {
        let mut gs = GradientSet::default();
        gs.insert(
            LayerId::Feature(0),
            ParamGrad {
                weight: Tensor::new(vec![1, 1], vec![g]).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
        );
        gs
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut m = scalar_model(0.3);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &scalar_grad(0.0), &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = scalar_model(0.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &scalar_grad(0.5), &mut st).unwrap();
        let w = m.params(LayerId::Feature(0)).unwrap().0.data()[0];
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((w - expected).abs() < 1e-18);
        assert!((w + 9.99998e-4).abs() < 2e-9);
    }

    #[test]
    fn missing_key_is_structural() {
        let mut m = scalar_model(0.0);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam_step(&mut m, &GradientSet::default(), &mut st),
            Err(Error::Structural(_))
        ));
    }
}
