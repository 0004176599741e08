use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, ConvLayer, LayerId, LinearLayer, ModelSpec, ParamGrad};
use crate::error::{dim_err, Error, Result};
use crate::rng::{uniform_init, Rng};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureLayer {
    Linear(LinearLayer),
    Conv(ConvLayer),
}

impl FeatureLayer {
    pub fn weight(&self) -> &Tensor {
        match self {
            FeatureLayer::Linear(l) => &l.weight,
            FeatureLayer::Conv(c) => &c.kernels,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            FeatureLayer::Linear(l) => &l.bias,
            FeatureLayer::Conv(c) => &c.bias,
        }
    }

    fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            FeatureLayer::Linear(l) => (&mut l.weight, &mut l.bias),
            FeatureLayer::Conv(c) => (&mut c.kernels, &mut c.bias),
        }
    }

    pub fn trainable(&self) -> bool {
        match self {
            FeatureLayer::Linear(l) => l.trainable,
            FeatureLayer::Conv(c) => c.trainable,
        }
    }

    fn set_trainable(&mut self, on: bool) {
        match self {
            FeatureLayer::Linear(l) => l.trainable = on,
            FeatureLayer::Conv(c) => c.trainable = on,
        }
    }
}

/// Outputs of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub latent: Tensor,
    pub class_logits: Tensor,
    pub aux: Tensor,
}

/// Gradients keyed by layer. The key set is exactly the set of trainable
/// layers; a trainable layer that the loss does not reach carries zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<LayerId, ParamGrad>,
}

impl GradientSet {
    pub fn get(&self, id: LayerId) -> Option<&ParamGrad> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: LayerId, grad: ParamGrad) {
        self.grads.insert(id, grad);
    }

    pub fn keys(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerId, &ParamGrad)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// All entries in canonical order (weights before bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()).copied())
            .collect()
    }
}

/// Which layers [`param_delta`] and related probes look at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerScope {
    All,
    Features,
    Layers(Vec<LayerId>),
}

/// Activations retained for the backward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the post-activation output of feature layer `i`.
    acts: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
    /// Spatial size at the input of each feature layer.
    spatial: Vec<(usize, usize)>,
    batch: usize,
}

/// Feature stack plus class head (`n x d`) and aux head (`m x d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeadModel {
    spec: ModelSpec,
    features: Vec<FeatureLayer>,
    class_head: LinearLayer,
    aux_head: LinearLayer,
}

impl SplitHeadModel {
    /// Allocates and initializes a model; `rng_for` supplies the generator
    /// for each layer, so callers decide which layers share draws.
    pub fn init(spec: &ModelSpec, mut rng_for: impl FnMut(LayerId) -> Rng) -> Result<Self> {
        Self::build(spec, |id, fan_in, w_shape, b_shape| {
            let mut rng = rng_for(id);
            let w = uniform_init(&mut rng, fan_in, w_shape)?;
            let b = uniform_init(&mut rng, fan_in, b_shape)?;
            Ok((w, b))
        })
    }

    /// A model of the given spec with all parameters zero.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Self::build(spec, |_, _, w, b| Ok((Tensor::zeros(w), Tensor::zeros(b))))
    }

    fn build(
        spec: &ModelSpec,
        mut make: impl FnMut(LayerId, usize, &[usize], &[usize]) -> Result<(Tensor, Tensor)>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut features = Vec::new();
        let mut width = spec.input_len();
        let hidden = match &spec.arch {
            ArchSpec::Mlp { hidden } => hidden,
            ArchSpec::Cnn {
                channels,
                pools,
                hidden,
            } => {
                let [mut c, mut h, mut w] = spec.input_shape;
                for (&oc, &pool) in channels.iter().zip(pools) {
                    let id = LayerId::Feature(features.len());
                    let (k, b) = make(id, c * super::KERNEL * super::KERNEL, &[oc, c, 3, 3], &[oc])?;
                    let layer = ConvLayer::new(k, b, 1, pool, true)?;
                    (c, h, w) = layer.output_dims(h, w);
                    features.push(FeatureLayer::Conv(layer));
                }
                width = c * h * w;
                hidden
            }
        };
        for &out in hidden {
            let id = LayerId::Feature(features.len());
            let (w, b) = make(id, width, &[out, width], &[out])?;
            features.push(FeatureLayer::Linear(LinearLayer::new(w, b, true)?));
            width = out;
        }
        let (w, b) = make(LayerId::ClassHead, width, &[spec.n_classes, width], &[spec.n_classes])?;
        let class_head = LinearLayer::new(w, b, true)?;
        let (w, b) = make(LayerId::AuxHead, width, &[spec.aux_dim, width], &[spec.aux_dim])?;
        let aux_head = LinearLayer::new(w, b, true)?;
        Ok(Self {
            spec: spec.clone(),
            features,
            class_head,
            aux_head,
        })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(
        spec: ModelSpec,
        features: Vec<FeatureLayer>,
        class_head: LinearLayer,
        aux_head: LinearLayer,
    ) -> Result<Self> {
        let template = Self::zeros(&spec)?;
        let model = Self {
            spec,
            features,
            class_head,
            aux_head,
        };
        model.check_same_shapes(&template)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch_tag(&self) -> &'static str {
        self.spec.arch.tag()
    }

    pub fn latent_dim(&self) -> usize {
        self.class_head.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.class_head.out_dim()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_head.out_dim()
    }

    pub fn features(&self) -> &[FeatureLayer] {
        &self.features
    }

    pub fn class_head(&self) -> &LinearLayer {
        &self.class_head
    }

    pub fn aux_head(&self) -> &LinearLayer {
        &self.aux_head
    }

    /// All layer ids in canonical order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.features.len())
            .map(LayerId::Feature)
            .chain([LayerId::ClassHead, LayerId::AuxHead])
            .collect()
    }

    /// Human-readable layer name: `l1..` for MLP layers, `conv1..` / `fc1..`
    /// inside a CNN, `class_head`, `aux_head`.
    pub fn layer_name(&self, id: LayerId) -> String {
        match id {
            LayerId::Feature(i) => {
                let convs = self
                    .features
                    .iter()
                    .filter(|l| matches!(l, FeatureLayer::Conv(_)))
                    .count();
                match (&self.spec.arch, i < convs) {
                    (ArchSpec::Mlp { .. }, _) => format!("l{}", i + 1),
                    (ArchSpec::Cnn { .. }, true) => format!("conv{}", i + 1),
                    (ArchSpec::Cnn { .. }, false) => format!("fc{}", i - convs + 1),
                }
            }
            other => other.to_string(),
        }
    }

    pub fn params(&self, id: LayerId) -> Option<(&Tensor, &Tensor)> {
        match id {
            LayerId::Feature(i) => self.features.get(i).map(|l| (l.weight(), l.bias())),
            LayerId::ClassHead => Some((&self.class_head.weight, &self.class_head.bias)),
            LayerId::AuxHead => Some((&self.aux_head.weight, &self.aux_head.bias)),
        }
    }

    pub fn params_mut(&mut self, id: LayerId) -> Option<(&mut Tensor, &mut Tensor)> {
        match id {
            LayerId::Feature(i) => self.features.get_mut(i).map(FeatureLayer::params_mut),
            LayerId::ClassHead => Some((&mut self.class_head.weight, &mut self.class_head.bias)),
            LayerId::AuxHead => Some((&mut self.aux_head.weight, &mut self.aux_head.bias)),
        }
    }

    /// Replaces a layer's parameters after checking shapes.
    pub fn set_params(&mut self, id: LayerId, weight: Tensor, bias: Tensor) -> Result<()> {
        let (w, b) = self
            .params_mut(id)
            .ok_or_else(|| Error::Structural(format!("no layer {id}")))?;
        if w.shape() != weight.shape() || b.shape() != bias.shape() {
            return Err(Error::Structural(format!(
                "layer {id}: shapes {:?}/{:?} do not match {:?}/{:?}",
                weight.shape(),
                bias.shape(),
                w.shape(),
                b.shape()
            )));
        }
        weight.ensure_finite("set_params")?;
        bias.ensure_finite("set_params")?;
        *w = weight;
        *b = bias;
        Ok(())
    }

    /// Parameter vector of one layer, weight then bias.
    pub fn layer_vector(&self, id: LayerId) -> Option<Vec<f64>> {
        self.params(id)
            .map(|(w, b)| w.data().iter().chain(b.data()).copied().collect())
    }

    pub fn is_trainable(&self, id: LayerId) -> bool {
        match id {
            LayerId::Feature(i) => self.features.get(i).is_some_and(FeatureLayer::trainable),
            LayerId::ClassHead => self.class_head.trainable,
            LayerId::AuxHead => self.aux_head.trainable,
        }
    }

    pub fn set_trainable(&mut self, id: LayerId, on: bool) {
        match id {
            LayerId::Feature(i) => {
                if let Some(l) = self.features.get_mut(i) {
                    l.set_trainable(on)
                }
            }
            LayerId::ClassHead => self.class_head.trainable = on,
            LayerId::AuxHead => self.aux_head.trainable = on,
        }
    }

    pub fn trainable_layers(&self) -> Vec<LayerId> {
        self.layer_ids()
            .into_iter()
            .filter(|&id| self.is_trainable(id))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_ids()
            .into_iter()
            .filter_map(|id| self.params(id))
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Errors unless `other` has identical layer shapes.
    pub fn check_same_shapes(&self, other: &SplitHeadModel) -> Result<()> {
        if self.features.len() != other.features.len() {
            return Err(Error::Structural(format!(
                "{} feature layers vs {}",
                self.features.len(),
                other.features.len()
            )));
        }
        for id in self.layer_ids() {
            let (a, b) = (self.params(id).unwrap(), other.params(id).unwrap());
            let kinds_match = match id {
                LayerId::Feature(i) => {
                    std::mem::discriminant(&self.features[i]) == std::mem::discriminant(&other.features[i])
                }
                _ => true,
            };
            if !kinds_match || a.0.shape() != b.0.shape() || a.1.shape() != b.1.shape() {
                return Err(Error::Structural(format!(
                    "layer {id}: {:?} vs {:?}",
                    a.0.shape(),
                    b.0.shape()
                )));
            }
        }
        Ok(())
    }

    /// Accepts `[B, C*H*W]` or `[B, C, H, W]` and returns the batch size.
    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let want = self.spec.input_len();
        let ok = match x.shape() {
            [_, n] => *n == want,
            [_, c, h, w] => [*c, *h, *w] == self.spec.input_shape,
            _ => false,
        };
        if !ok {
            return dim_err(
                "SplitHeadModel::forward",
                format!(
                    "input {:?} does not match model input {:?}",
                    x.shape(),
                    self.spec.input_shape
                ),
            );
        }
        Ok(x.shape()[0])
    }

    fn run_features(&self, x: &[f64], batch: usize, keep: bool) -> (Vec<f64>, Option<Trace>) {
        let [_, mut h, mut w] = self.spec.input_shape;
        let mut trace = keep.then(|| Trace {
            acts: vec![x.to_vec()],
            argmax: Vec::new(),
            spatial: Vec::new(),
            batch,
        });
        let mut cur: Option<Vec<f64>> = None;
        for layer in &self.features {
            let input: &[f64] = cur.as_deref().unwrap_or(x);
            let (out, arg, next_hw) = match layer {
                FeatureLayer::Linear(l) => {
                    let mut y = l.forward_raw(input, batch);
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                    (y, Vec::new(), (h, w))
                }
                FeatureLayer::Conv(c) => {
                    let (y, arg) = c.forward_raw(input, batch, h, w);
                    let (_, ph, pw) = c.output_dims(h, w);
                    (y, arg, (ph, pw))
                }
            };
            if let Some(t) = trace.as_mut() {
                t.acts.push(out.clone());
                t.argmax.push(arg);
                t.spatial.push((h, w));
            }
            (h, w) = next_hw;
            cur = Some(out);
        }
        (cur.unwrap_or_else(|| x.to_vec()), trace)
    }

    /// Post-ReLU latent `z`, shape `B x d`.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let (z, _) = self.run_features(x.data(), batch, false);
        let z = Tensor::from_parts(vec![batch, self.latent_dim()], z);
        z.ensure_finite("latent")?;
        Ok(z)
    }

    pub fn class_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.class_head.forward(&self.latent(x)?)
    }

    pub fn aux_outputs(&self, x: &Tensor) -> Result<Tensor> {
        self.aux_head.forward(&self.latent(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let latent = self.latent(x)?;
        Ok(ForwardOutput {
            class_logits: self.class_head.forward(&latent)?,
            aux: self.aux_head.forward(&latent)?,
            latent,
        })
    }

    /// Class predictions with ties broken toward the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.class_logits(x)?;
        Ok(logits.data().chunks_exact(self.n_classes()).map(argmax).collect())
    }

    /// Forward with the head outputs requested, returning the trace for
    /// [`Self::backward`].
    fn forward_traced(&self, x: &Tensor) -> Result<(Trace, Vec<f64>)> {
        let batch = self.check_input(x)?;
        let (z, trace) = self.run_features(x.data(), batch, true);
        Tensor::from_parts(vec![batch, self.latent_dim()], z.clone()).ensure_finite("forward")?;
        Ok((trace.expect("trace requested"), z))
    }

    pub(crate) fn class_forward_traced(&self, x: &Tensor) -> Result<(TracedForward, Tensor)> {
        let (trace, z) = self.forward_traced(x)?;
        let logits = Tensor::from_parts(
            vec![trace.batch, self.n_classes()],
            self.class_head.forward_raw(&z, trace.batch),
        );
        logits.ensure_finite("class head")?;
        Ok((TracedForward { trace, latent: z }, logits))
    }

    pub(crate) fn aux_forward_traced(&self, x: &Tensor) -> Result<(TracedForward, Tensor)> {
        let (trace, z) = self.forward_traced(x)?;
        let aux = Tensor::from_parts(
            vec![trace.batch, self.aux_dim()],
            self.aux_head.forward_raw(&z, trace.batch),
        );
        aux.ensure_finite("aux head")?;
        Ok((TracedForward { trace, latent: z }, aux))
    }

    /// Backpropagates head-output gradients. Returns gradients for exactly
    /// the trainable layers; a head without an upstream gradient gets zeros.
    pub(crate) fn backward(&self, fwd: &TracedForward, d_class: Option<&[f64]>, d_aux: Option<&[f64]>) -> GradientSet {
        let trace = &fwd.trace;
        let batch = trace.batch;
        let d = self.latent_dim();
        let any_feature_trainable = self.features.iter().any(FeatureLayer::trainable);
        let mut grads = GradientSet::default();
        let mut dz = vec![0.0; batch * d];

        for (id, head, upstream) in [
            (LayerId::ClassHead, &self.class_head, d_class),
            (LayerId::AuxHead, &self.aux_head, d_aux),
        ] {
            match upstream {
                Some(dy) => {
                    let (pg, dx) = head.backward_raw(&fwd.latent, dy, batch, head.trainable, any_feature_trainable);
                    if let Some(pg) = pg {
                        grads.insert(id, pg);
                    }
                    if let Some(dx) = dx {
                        dz.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                    }
                }
                None if head.trainable => grads.insert(id, ParamGrad::zeros_like(&head.weight, &head.bias)),
                None => {}
            }
        }

        let lowest_trainable = self.features.iter().position(FeatureLayer::trainable);
        let Some(lowest) = lowest_trainable else {
            return grads;
        };
        let mut upstream = dz;
        for i in (lowest..self.features.len()).rev() {
            let layer = &self.features[i];
            let want_input = i > lowest;
            let (input, output) = (&trace.acts[i], &trace.acts[i + 1]);
            let (pg, dx) = match layer {
                FeatureLayer::Linear(l) => {
                    let dpre: Vec<f64> = upstream
                        .iter()
                        .zip(output)
                        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                        .collect();
                    l.backward_raw(input, &dpre, batch, l.trainable, want_input)
                }
                FeatureLayer::Conv(c) => c.backward_raw(
                    input,
                    output,
                    &trace.argmax[i],
                    &upstream,
                    batch,
                    trace.spatial[i],
                    c.trainable,
                    want_input,
                ),
            };
            if let Some(pg) = pg {
                grads.insert(LayerId::Feature(i), pg);
            }
            match dx {
                Some(dx) => upstream = dx,
                None => break,
            }
        }
        grads
    }
}

pub(crate) struct TracedForward {
    trace: Trace,
    latent: Vec<f64>,
}

/// `after - before` over the selected layers, concatenated in canonical
/// layer order (weights before bias within a layer).
pub fn param_delta(before: &SplitHeadModel, after: &SplitHeadModel, scope: &LayerScope) -> Result<Vec<f64>> {
    before.check_same_shapes(after)?;
    let mut ids: Vec<LayerId> = match scope {
        LayerScope::All => before.layer_ids(),
        LayerScope::Features => (0..before.features.len()).map(LayerId::Feature).collect(),
        LayerScope::Layers(ids) => ids.clone(),
    };
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::new();
    for id in ids {
        let (a, b) = (
            before
                .layer_vector(id)
                .ok_or_else(|| Error::Structural(format!("no layer {id}")))?,
            after
                .layer_vector(id)
                .ok_or_else(|| Error::Structural(format!("no layer {id}")))?,
        );
        out.extend(b.iter().zip(&a).map(|(y, x)| y - x));
    }
    Ok(out)
}
