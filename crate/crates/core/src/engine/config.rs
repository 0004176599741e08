//! Declarative experiment configuration, validation and hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataSpec;
use crate::error::{Error, FieldError, Result};
use crate::nn::{ArchSpec, LayerId, ModelSpec, SplitHeadModel};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::optim::AdamConfig;

/// Per-layer initialization tag: `A` draws are shared between teacher and
/// student, `R` draws are independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitTag {
    #[serde(rename = "A")]
    Shared,
    #[serde(rename = "R")]
    Random,
}

/// One model's architecture, init tags and trainable flags. Tags and flags
/// are listed as (feature layers..., class head, aux head); empty lists mean
/// all-shared and all-trainable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSide {
    pub arch: ArchSpec,
    #[serde(default)]
    pub init: Vec<InitTag>,
    #[serde(default)]
    pub trainable: Vec<bool>,
}

impl ModelSide {
    pub fn layer_count(&self) -> usize {
        self.arch.feature_layers() + 2
    }

    pub fn tag(&self, id: LayerId) -> InitTag {
        self.init
            .get(position(id, self.layer_count()))
            .copied()
            .unwrap_or(InitTag::Shared)
    }

    pub fn is_trainable(&self, id: LayerId) -> bool {
        self.trainable
            .get(position(id, self.layer_count()))
            .copied()
            .unwrap_or(true)
    }
}

fn position(id: LayerId, layer_count: usize) -> usize {
    match id {
        LayerId::Feature(i) => i,
        LayerId::ClassHead => layer_count - 2,
        LayerId::AuxHead => layer_count - 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    /// Student aux head, after teacher training and before distillation.
    StudentAux,
    /// Student class head, after teacher training and before distillation.
    StudentClass,
    /// Class head of the trained student, at evaluation only.
    PosthocClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedWhen {
    BeforeAuxTraining,
    AfterTraining,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub target: PerturbTarget,
    pub delta: f64,
}

impl PerturbationSpec {
    pub fn applied_when(&self) -> AppliedWhen {
        match self.target {
            PerturbTarget::StudentAux | PerturbTarget::StudentClass => AppliedWhen::BeforeAuxTraining,
            PerturbTarget::PosthocClass => AppliedWhen::AfterTraining,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    /// Labelled-data batch size for the teacher.
    pub batch_size: usize,
    pub eval_noise_batches: usize,
    pub eval_noise_batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            teacher_epochs: 5,
            student_epochs: 5,
            batch_size: 1024,
            eval_noise_batches: 10,
            eval_noise_batch_size: 1000,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Optional measurements beyond accuracy and losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Cosine between teacher (init -> final) and student (init -> end of
    /// first epoch) parameter updates, per layer.
    pub update_cosine: bool,
    /// Post-hoc class-head perturbation scales evaluated on the trained
    /// teacher and student (same noise direction for every scale).
    pub posthoc_class_deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(rename = "axis")]
    pub axes: Vec<Axis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Export group (`fig2`, ..., `appendix_*`).
    #[serde(default)]
    pub figure: String,
    #[serde(default)]
    pub data: DataSpec,
    pub teacher: ModelSide,
    pub student: ModelSide,
    /// Aux-head width `m`.
    pub aux_dim: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub probes: ProbeSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Axis names with dedicated handling; any other axis must be a dotted
/// path into the config.
pub const NAMED_AXES: &[&str] = &[
    "m",
    "N",
    "d",
    "delta",
    "n_classes",
    "depth",
    "width",
    "arch",
    "perlin_resolution",
];

impl ExperimentConfig {
    /// Two-layer MLP teacher and student with every layer shared and
    /// trainable, uniform noise, `m` aux outputs.
    pub fn baseline(m: usize) -> Self {
        let side = ModelSide {
            arch: ArchSpec::mlp(&[256, 256]),
            init: Vec::new(),
            trainable: Vec::new(),
        };
        Self {
            name: "baseline".into(),
            figure: String::new(),
            data: DataSpec::default(),
            teacher: side.clone(),
            student: side,
            aux_dim: m,
            noise: NoiseSpec::default(),
            training: TrainingSpec::default(),
            perturbation: None,
            probes: ProbeSpec::default(),
            seeds: default_seeds(),
            sweep: SweepSpec::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("toml (byte {})", s.start))
                .unwrap_or_else(|| "toml".into());
            Error::Config(vec![FieldError::new(field, e.message().to_string())])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![FieldError::new("path", format!("{}: {e}", path.display()))]))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parameter(format!("config is not TOML-representable: {e}")))
    }

    pub fn n_classes(&self) -> usize {
        self.data.class_count()
    }

    pub fn teacher_spec(&self) -> ModelSpec {
        ModelSpec::mnist(self.teacher.arch.clone(), self.n_classes(), self.aux_dim)
    }

    pub fn student_spec(&self) -> ModelSpec {
        ModelSpec::mnist(self.student.arch.clone(), self.n_classes(), self.aux_dim)
    }

    /// Layers drawn from the shared stream: tagged `A` on both sides.
    pub fn is_shared(&self, id: LayerId) -> bool {
        let in_student = match id {
            LayerId::Feature(i) => i < self.student.arch.feature_layers(),
            _ => true,
        };
        let in_teacher = match id {
            LayerId::Feature(i) => i < self.teacher.arch.feature_layers(),
            _ => true,
        };
        in_student && in_teacher && self.teacher.tag(id) == InitTag::Shared && self.student.tag(id) == InitTag::Shared
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |f: &str, m: String| errs.push(FieldError::new(f, m));

        if self.seeds.is_empty() {
            push("seeds", "at least one seed is required".into());
        }
        if self.aux_dim == 0 {
            push("aux_dim", "must be at least 1".into());
        }
        let n = self.n_classes();
        if let Some(k) = self.data.n_classes {
            if k < 2 || k > self.data.dataset.class_count() {
                push(
                    "data.n_classes",
                    format!("must lie in 2..={}, got {k}", self.data.dataset.class_count()),
                );
            }
        }
        for (field, side, spec) in [
            ("teacher", &self.teacher, self.teacher_spec()),
            ("student", &self.student, self.student_spec()),
        ] {
            if let Err(e) = spec.validate() {
                push(&format!("{field}.arch"), e.to_string());
            }
            let layers = side.layer_count();
            if !side.init.is_empty() && side.init.len() != layers {
                push(
                    &format!("{field}.init"),
                    format!(
                        "expected {layers} tags (features, class head, aux head), got {}",
                        side.init.len()
                    ),
                );
            }
            if !side.trainable.is_empty() && side.trainable.len() != layers {
                push(
                    &format!("{field}.trainable"),
                    format!("expected {layers} flags, got {}", side.trainable.len()),
                );
            }
        }
        if self.teacher_spec().validate().is_ok() && self.student_spec().validate().is_ok() && n > 0 && self.aux_dim > 0
        {
            if let (Ok(t), Ok(s)) = (
                SplitHeadModel::zeros(&self.teacher_spec()),
                SplitHeadModel::zeros(&self.student_spec()),
            ) {
                for id in s.layer_ids() {
                    if !self.is_shared(id) {
                        continue;
                    }
                    let (tw, sw) = (
                        t.params(id).map(|p| p.0.shape().to_vec()),
                        s.params(id).map(|p| p.0.shape().to_vec()),
                    );
                    if tw != sw {
                        push(
                            "student.init",
                            format!(
                                "layer {} is shared but shapes differ (teacher {tw:?}, student {sw:?})",
                                s.layer_name(id)
                            ),
                        );
                    }
                }
            }
        }
        if self.noise.batch_size == 0 {
            push("noise.batch_size", "must be at least 1".into());
        }
        if self.noise.steps_per_epoch == 0 {
            push("noise.steps_per_epoch", "must be at least 1".into());
        }
        if self.noise.kind == NoiseKind::Perlin && self.noise.perlin_resolution == 0 {
            push("noise.perlin_resolution", "must be at least 1".into());
        }
        let t = &self.training;
        if t.batch_size == 0 {
            push("training.batch_size", "must be at least 1".into());
        }
        if t.eval_noise_batches == 0 || t.eval_noise_batch_size == 0 {
            push(
                "training.eval_noise_batches",
                "evaluation noise must be non-empty".into(),
            );
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            push("training.optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            push("training.optimizer", "betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            push(
                "training.optimizer",
                "eps must be positive and weight_decay non-negative".into(),
            );
        }
        if let Some(p) = &self.perturbation {
            if !(p.delta >= 0.0 && p.delta.is_finite()) {
                push(
                    "perturbation.delta",
                    format!("must be finite and >= 0, got {}", p.delta),
                );
            }
        }
        if self
            .probes
            .posthoc_class_deltas
            .iter()
            .any(|d| !(*d >= 0.0 && d.is_finite()))
        {
            push("probes.posthoc_class_deltas", "scales must be finite and >= 0".into());
        }
        for (i, axis) in self.sweep.axes.iter().enumerate() {
            if axis.values.is_empty() {
                push(&format!("sweep.axis[{i}].values"), "must not be empty".into());
            }
            if !NAMED_AXES.contains(&axis.name.as_str()) && !axis.name.contains('.') {
                push(
                    &format!("sweep.axis[{i}].name"),
                    format!(
                        "unknown axis {:?}; use one of {NAMED_AXES:?} or a dotted config path",
                        axis.name
                    ),
                );
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Identity of the run configuration, independent of field order, seeds,
    /// sweep grid and data location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seeds");
            obj.remove("sweep");
            if let Some(data) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
                data.remove("root");
            }
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}
