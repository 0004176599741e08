//! Per-run results and their on-disk record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;

/// Accuracy of the teacher and student after adding `delta * eps` to their
/// class heads, with the same `eps` for every `delta` of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosthocPoint {
    pub delta: f64,
    pub teacher_acc: f64,
    pub student_acc: f64,
}

/// Test-set quantities feeding the closed-form predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProbe {
    pub latent_dim: usize,
    /// Mean squared row norm of the aux-head weight.
    pub beta_hat: f64,
    pub max_aux_row_cosine: f64,
    /// Mean squared latent component.
    pub v: f64,
    /// Test error rate.
    pub alpha: f64,
    /// Mean top-2 logit margin; absent together with `s`.
    pub mean_margin: Option<f64>,
    /// Calibration; absent when the error rate is outside (0, 0.5).
    pub s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadCosines {
    /// Teacher aux head vs student aux head when distillation starts.
    pub aux_teacher_student_init: Option<f64>,
    pub aux_teacher_student_final: Option<f64>,
    pub class_teacher_student_final: Option<f64>,
    /// Teacher class head, initialization vs after training.
    pub teacher_class_init_final: Option<f64>,
    /// Student aux head, start of distillation vs end.
    pub student_aux_init_final: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_classes: usize,
    pub aux_dim: usize,
    pub noise_samples_per_epoch: usize,
    pub teacher_acc: f64,
    /// Student accuracy as evaluated (after any post-hoc perturbation).
    pub student_acc: f64,
    pub student_acc_unperturbed: f64,
    pub teacher_epoch_losses: Vec<f64>,
    pub student_epoch_losses: Vec<f64>,
    /// Aux MSE on held-out noise; entry 0 is before distillation, then one per epoch.
    pub aux_eval_losses: Vec<f64>,
    /// `|W_final - W_init| / |W_init|` per layer name, bias included.
    pub teacher_relative_change: BTreeMap<String, f64>,
    pub student_relative_change: BTreeMap<String, f64>,
    pub head_cosines: HeadCosines,
    /// Per layer: cosine of the teacher's whole-training update with the
    /// student's first-epoch update; `None` where undefined.
    pub update_cosines: Option<BTreeMap<String, Option<f64>>>,
    pub posthoc: Vec<PosthocPoint>,
    pub teacher_probe: ModelProbe,
    pub student_probe: ModelProbe,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn aux_eval_loss_init(&self) -> f64 {
        self.aux_eval_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn aux_eval_loss_final(&self) -> f64 {
        self.aux_eval_losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Equality of every metric, ignoring wall time. Compares bit patterns so
    /// NaNs match themselves.
    pub fn same_metrics(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| {
            let mut r = r.clone();
            r.wall_time_s = 0.0;
            serde_json::to_string(&BitExact(&r)).unwrap_or_default()
        };
        strip(self) == strip(other)
    }
}

/// Serializes floats by bit pattern, for exact comparisons.
struct BitExact<'a>(&'a RunReport);

impl Serialize for BitExact<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let value = serde_json::to_value(self.0).map_err(serde::ser::Error::custom)?;
        bits(value).serialize(s)
    }
}

fn bits(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => Value::String(format!("{:016x}", n.as_f64().unwrap().to_bits())),
        Value::Array(a) => Value::Array(a.into_iter().map(bits).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, bits(v))).collect()),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error,
}

/// What `run` and `sweep` write per `(config hash, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Sweep coordinates that produced `config`; empty for a plain run.
    pub axes: BTreeMap<String, serde_json::Value>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub report: Option<RunReport>,
}

impl RunRecord {
    pub fn key(&self) -> (String, u64) {
        (self.config_hash.clone(), self.seed)
    }

    pub fn file_name(&self) -> String {
        record_file_name(&self.config_hash, self.seed)
    }
}

pub fn record_file_name(hash: &str, seed: u64) -> String {
    format!("{hash}_s{seed}.json")
}
