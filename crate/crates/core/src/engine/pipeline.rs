//! Teacher training, noise distillation and evaluation.
//!
//! The stages are typed so they can only run in order: a [`TrainedTeacher`]
//! is needed to prepare a student, a [`PreparedStudent`] to distill, and a
//! [`DistilledStudent`] to produce a [`RunReport`].

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AppliedWhen, ExperimentConfig, PerturbTarget};
use super::report::{HeadCosines, ModelProbe, PosthocPoint, RunReport};
use super::seeds::Stream;
use crate::data::{epoch_batches, DataSpec, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_backward, load_checkpoint, mse, mse_aux_backward, param_delta, save_checkpoint, LayerId, LayerScope,
    SplitHeadModel,
};
use crate::optim::{adam_step, AdamState};
use crate::rng::{gaussian_perturb, uniform_init};
use crate::tensor::{argmax, cosine, Tensor};
use crate::theory::{aux_projection_diagnostics, calibration_from_logits, mean_square};

const EVAL_CHUNK: usize = 2048;

/// Teacher and student at initialization. Layers tagged shared on both
/// sides come from the teacher's streams and are bit-identical.
pub fn build_pair(cfg: &ExperimentConfig, seed: u64) -> Result<(SplitHeadModel, SplitHeadModel)> {
    let mut teacher = SplitHeadModel::init(&cfg.teacher_spec(), |id| Stream::TeacherInit(id).rng(seed))?;
    let mut student = SplitHeadModel::init(&cfg.student_spec(), |id| {
        if cfg.is_shared(id) {
            Stream::TeacherInit(id).rng(seed)
        } else {
            Stream::StudentInit(id).rng(seed)
        }
    })?;
    for id in student.layer_ids() {
        if cfg.is_shared(id) {
            let (tw, tb) = teacher.params(id).expect("shared layer exists in teacher");
            let (sw, sb) = student.params(id).expect("listed layer");
            if tw.shape() != sw.shape() || tb.shape() != sb.shape() {
                return Err(Error::Structural(format!(
                    "shared layer {} has teacher shape {:?} but student shape {:?}",
                    student.layer_name(id),
                    tw.shape(),
                    sw.shape()
                )));
            }
        }
    }
    for id in teacher.layer_ids() {
        teacher.set_trainable(id, cfg.teacher.is_trainable(id));
    }
    for id in student.layer_ids() {
        student.set_trainable(id, cfg.student.is_trainable(id));
    }
    Ok((teacher, student))
}

/// Fraction of argmax-correct class predictions.
pub fn evaluate(model: &SplitHeadModel, split: &DatasetSplit) -> Result<f64> {
    let mut correct = 0usize;
    for_chunks(split, |x, labels| {
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(())
    })?;
    Ok(correct as f64 / split.len().max(1) as f64)
}

fn for_chunks(split: &DatasetSplit, mut f: impl FnMut(Tensor, &[usize]) -> Result<()>) -> Result<()> {
    let (rows, width) = split.images().dims2()?;
    for start in (0..rows).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(rows);
        let x = Tensor::new(
            vec![end - start, width],
            split.images().data()[start * width..end * width].to_vec(),
        )?;
        f(x, &split.labels()[start..end])?;
    }
    Ok(())
}

/// Test-set latents in one `[N, d]` tensor.
pub fn test_latents(model: &SplitHeadModel, split: &DatasetSplit) -> Result<Tensor> {
    let mut data = Vec::with_capacity(split.len() * model.latent_dim());
    for_chunks(split, |x, _| {
        data.extend_from_slice(model.latent(&x)?.data());
        Ok(())
    })?;
    Tensor::new(vec![split.len(), model.latent_dim()], data)
}

#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    init: SplitHeadModel,
    model: SplitHeadModel,
    epoch_losses: Vec<f64>,
    test_acc: f64,
}

impl TrainedTeacher {
    pub fn init(&self) -> &SplitHeadModel {
        &self.init
    }

    pub fn model(&self) -> &SplitHeadModel {
        &self.model
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn test_acc(&self) -> f64 {
        self.test_acc
    }

    /// Rebuilds a teacher from a checkpoint written after training. The
    /// initialization is re-derived from `(cfg, seed)`.
    pub fn from_trained(
        cfg: &ExperimentConfig,
        seed: u64,
        model: SplitHeadModel,
        epoch_losses: Vec<f64>,
        test: &DatasetSplit,
    ) -> Result<Self> {
        let (init, _) = build_pair(cfg, seed)?;
        init.check_same_shapes(&model)?;
        if init.aux_head() != model.aux_head() {
            return Err(Error::Structural(
                "checkpoint aux head differs from this config's initialization; wrong seed or config?".into(),
            ));
        }
        let test_acc = evaluate(&model, test)?;
        Ok(Self {
            init,
            model,
            epoch_losses,
            test_acc,
        })
    }

    /// The same teacher with its (never trained) aux head redrawn for a new `m`.
    fn with_aux_dim(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        for model in [&mut out.init, &mut out.model] {
            let d = model.latent_dim();
            let m = cfg.aux_dim;
            let mut rng = Stream::TeacherInit(LayerId::AuxHead).rng(seed);
            let w = uniform_init(&mut rng, d, &[m, d])?;
            let b = uniform_init(&mut rng, d, &[m])?;
            let trainable = model.is_trainable(LayerId::AuxHead);
            let mut spec = model.spec().clone();
            spec.aux_dim = m;
            let mut resized = SplitHeadModel::from_layers(
                spec,
                model.features().to_vec(),
                model.class_head().clone(),
                crate::nn::LinearLayer::new(w, b, trainable)?,
            )?;
            std::mem::swap(model, &mut resized);
        }
        Ok(out)
    }
}

fn training_err(phase: &'static str, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Training {
            phase,
            epoch,
            message: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Cross-entropy training on labelled data. Only the class head and the
/// feature layers receive gradient.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: SplitHeadModel,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<TrainedTeacher> {
    if teacher.n_classes() != train.n_classes() {
        return Err(Error::Structural(format!(
            "class head has {} outputs but the data has {} classes",
            teacher.n_classes(),
            train.n_classes()
        )));
    }
    let init = teacher.clone();
    let mut model = teacher;
    let mut state = AdamState::new(cfg.training.optimizer);
    let mut rng = Stream::TeacherBatching.rng(seed);
    let mut epoch_losses = Vec::with_capacity(cfg.training.teacher_epochs);
    for epoch in 1..=cfg.training.teacher_epochs {
        let mut total = 0.0;
        for batch in epoch_batches(train.len(), cfg.training.batch_size, &mut rng)? {
            let (x, labels) = train.gather(&batch);
            let (loss, grads) =
                cross_entropy_backward(&model, &x, &labels).map_err(|e| training_err("teacher", epoch, e))?;
            adam_step(&mut model, &grads, &mut state).map_err(|e| training_err("teacher", epoch, e))?;
            total += loss * batch.len() as f64;
        }
        let loss = total / train.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Training {
                phase: "teacher",
                epoch,
                message: "non-finite epoch loss".into(),
            });
        }
        info!("phase=teacher seed={seed} epoch={epoch} loss={loss:.6}");
        epoch_losses.push(loss);
    }
    let test_acc = evaluate(&model, test)?;
    info!("phase=teacher seed={seed} test_acc={test_acc:.5}");
    Ok(TrainedTeacher {
        init,
        model,
        epoch_losses,
        test_acc,
    })
}

/// A student whose heads may have been perturbed; ready for distillation.
#[derive(Clone, Debug)]
pub struct PreparedStudent {
    model: SplitHeadModel,
}

impl PreparedStudent {
    pub fn model(&self) -> &SplitHeadModel {
        &self.model
    }
}

/// Applies a before-distillation head perturbation, if configured. Needs the
/// trained teacher so that the order teacher -> perturb -> distill holds.
pub fn prepare_student(
    cfg: &ExperimentConfig,
    seed: u64,
    student: SplitHeadModel,
    teacher: &TrainedTeacher,
) -> Result<PreparedStudent> {
    if student.aux_dim() != teacher.model().aux_dim() {
        return Err(Error::Structural(format!(
            "student aux head has {} outputs, teacher {}",
            student.aux_dim(),
            teacher.model().aux_dim()
        )));
    }
    let mut model = student;
    if let Some(p) = cfg
        .perturbation
        .filter(|p| p.applied_when() == AppliedWhen::BeforeAuxTraining)
    {
        let id = match p.target {
            PerturbTarget::StudentAux => LayerId::AuxHead,
            _ => LayerId::ClassHead,
        };
        let mut rng = Stream::Perturbation.rng(seed);
        let (w, b) = model.params(id).expect("heads always exist");
        let (w, b) = (
            gaussian_perturb(w, &mut rng, p.delta)?,
            gaussian_perturb(b, &mut rng, p.delta)?,
        );
        model.set_params(id, w, b)?;
    }
    Ok(PreparedStudent { model })
}

#[derive(Clone, Debug)]
pub struct DistilledStudent {
    start: SplitHeadModel,
    model: SplitHeadModel,
    after_first_epoch: Option<SplitHeadModel>,
    epoch_losses: Vec<f64>,
    aux_eval_losses: Vec<f64>,
}

impl DistilledStudent {
    /// The student as distillation began (after any perturbation).
    pub fn start(&self) -> &SplitHeadModel {
        &self.start
    }

    pub fn model(&self) -> &SplitHeadModel {
        &self.model
    }

    pub fn after_first_epoch(&self) -> Option<&SplitHeadModel> {
        self.after_first_epoch.as_ref()
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn aux_eval_losses(&self) -> &[f64] {
        &self.aux_eval_losses
    }
}

/// Mean aux MSE between teacher and student over the held-out noise batches.
pub fn aux_eval_loss(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &SplitHeadModel,
    student: &SplitHeadModel,
) -> Result<f64> {
    let shape = teacher.spec().input_shape;
    let mut total = 0.0;
    for i in 0..cfg.training.eval_noise_batches {
        let mut rng = Stream::EvalNoise(i as u64).rng(seed);
        let x = cfg.noise.sample(cfg.training.eval_noise_batch_size, shape, &mut rng)?;
        total += mse(&student.aux_outputs(&x)?, &teacher.aux_outputs(&x)?)?.0;
    }
    Ok(total / cfg.training.eval_noise_batches as f64)
}

/// Trains the student's aux outputs to match the frozen teacher's on fresh
/// noise: `steps_per_epoch` batches per epoch, one Adam step each.
pub fn distill_student(
    cfg: &ExperimentConfig,
    seed: u64,
    student: PreparedStudent,
    teacher: &TrainedTeacher,
) -> Result<DistilledStudent> {
    let teacher = teacher.model();
    let start = student.model;
    let mut model = start.clone();
    let shape = model.spec().input_shape;
    let mut state = AdamState::new(cfg.training.optimizer);
    let mut after_first_epoch = None;
    let mut epoch_losses = Vec::with_capacity(cfg.training.student_epochs);
    let mut aux_eval_losses = vec![aux_eval_loss(cfg, seed, teacher, &model)?];
    let steps = cfg.noise.steps_per_epoch;
    for epoch in 1..=cfg.training.student_epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let global = ((epoch - 1) * steps + step) as u64;
            let mut rng = Stream::Noise(global).rng(seed);
            let x = cfg.noise.sample(cfg.noise.batch_size, shape, &mut rng)?;
            let target = teacher.aux_outputs(&x)?;
            let (loss, grads) = mse_aux_backward(&model, &x, &target).map_err(|e| training_err("student", epoch, e))?;
            adam_step(&mut model, &grads, &mut state).map_err(|e| training_err("student", epoch, e))?;
            total += loss;
        }
        let loss = total / steps as f64;
        if !loss.is_finite() {
            return Err(Error::Training {
                phase: "student",
                epoch,
                message: "non-finite epoch loss".into(),
            });
        }
        let eval = aux_eval_loss(cfg, seed, teacher, &model)?;
        info!("phase=student seed={seed} epoch={epoch} loss={loss:.6e} aux_eval={eval:.6e}");
        epoch_losses.push(loss);
        aux_eval_losses.push(eval);
        if epoch == 1 && cfg.probes.update_cosine {
            after_first_epoch = Some(model.clone());
        }
    }
    Ok(DistilledStudent {
        start,
        model,
        after_first_epoch,
        epoch_losses,
        aux_eval_losses,
    })
}

/// Cosine between the teacher's update over its whole training and the
/// student's update over its first distillation epoch, for one layer.
pub fn first_epoch_update_cosine(teacher: &TrainedTeacher, student: &DistilledStudent, layer: LayerId) -> Result<f64> {
    let after = student
        .after_first_epoch()
        .ok_or_else(|| Error::Parameter("first-epoch snapshot not recorded; enable probes.update_cosine".into()))?;
    update_cosine(teacher.init(), teacher.model(), student.start(), after, layer)
}

/// Cosine of `param_delta(t0, t1)` and `param_delta(s0, s1)` restricted to one layer.
pub fn update_cosine(
    t0: &SplitHeadModel,
    t1: &SplitHeadModel,
    s0: &SplitHeadModel,
    s1: &SplitHeadModel,
    layer: LayerId,
) -> Result<f64> {
    let scope = LayerScope::Layers(vec![layer]);
    let dt = param_delta(t0, t1, &scope)?;
    let ds = param_delta(s0, s1, &scope)?;
    if dt.len() != ds.len() {
        return Err(Error::Structural(format!(
            "layer {layer} has {} teacher parameters and {} student parameters",
            dt.len(),
            ds.len()
        )));
    }
    cosine(&dt, &ds).ok_or_else(|| Error::UndefinedCosine(format!("zero update in layer {layer}")))
}

fn relative_change(before: &SplitHeadModel, after: &SplitHeadModel) -> BTreeMap<String, f64> {
    before
        .layer_ids()
        .into_iter()
        .map(|id| {
            let a = before.layer_vector(id).expect("listed layer");
            let b = after.layer_vector(id).expect("same architecture");
            let diff: f64 = a.iter().zip(&b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
            let base: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            (before.layer_name(id), diff / base)
        })
        .collect()
}

fn layer_cosine(a: &SplitHeadModel, b: &SplitHeadModel, id: LayerId) -> Option<f64> {
    let (x, y) = (a.layer_vector(id)?, b.layer_vector(id)?);
    (x.len() == y.len()).then(|| cosine(&x, &y)).flatten()
}

/// Class predictions, accuracy and the calibration probe from fixed latents.
struct Readout {
    latents: Tensor,
    probe: ModelProbe,
    acc: f64,
}

fn readout(model: &SplitHeadModel, test: &DatasetSplit) -> Result<Readout> {
    let latents = test_latents(model, test)?;
    let logits = model.class_head().forward(&latents)?;
    let acc = accuracy(&logits, test.labels());
    let (beta_hat, max_aux_row_cosine) = aux_projection_diagnostics(&model.aux_head().weight)?;
    let (s, alpha, mean_margin) = match calibration_from_logits(&logits, test.labels()) {
        Ok((s, alpha, margin)) => (Some(s), alpha, Some(margin)),
        Err(Error::OutOfModel(_)) => (None, 1.0 - acc, None),
        Err(e) => return Err(e),
    };
    let probe = ModelProbe {
        latent_dim: model.latent_dim(),
        beta_hat,
        max_aux_row_cosine,
        v: mean_square(&latents),
        alpha,
        mean_margin,
        s,
    };
    Ok(Readout { latents, probe, acc })
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = logits.shape()[1];
    let correct = logits
        .data()
        .chunks_exact(n)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Class-head noise direction for post-hoc perturbation: one draw per run,
/// teacher first, reused for every scale.
fn posthoc_directions(seed: u64, teacher: &SplitHeadModel, student: &SplitHeadModel) -> Result<[(Tensor, Tensor); 2]> {
    let mut rng = Stream::PosthocPerturb.rng(seed);
    let mut draw = |m: &SplitHeadModel| -> Result<(Tensor, Tensor)> {
        let (w, b) = m.params(LayerId::ClassHead).expect("class head");
        Ok((
            gaussian_perturb(&Tensor::zeros(w.shape()), &mut rng, 1.0)?,
            gaussian_perturb(&Tensor::zeros(b.shape()), &mut rng, 1.0)?,
        ))
    };
    Ok([draw(teacher)?, draw(student)?])
}

fn perturbed_accuracy(
    model: &SplitHeadModel,
    r: &Readout,
    dir: &(Tensor, Tensor),
    delta: f64,
    labels: &[usize],
) -> Result<f64> {
    if delta == 0.0 {
        return Ok(r.acc);
    }
    let head = model.class_head();
    let w = head.weight.add(&dir.0.scale(delta)?)?;
    let b = head.bias.add(&dir.1.scale(delta)?)?;
    let logits = crate::nn::LinearLayer::new(w, b, false)?.forward(&r.latents)?;
    Ok(accuracy(&logits, labels))
}

/// Evaluates a distilled student against its teacher and collects every metric.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &TrainedTeacher,
    student: &DistilledStudent,
    test: &DatasetSplit,
) -> Result<RunReport> {
    let t_read = readout(teacher.model(), test)?;
    let s_read = readout(student.model(), test)?;
    let dirs = posthoc_directions(seed, teacher.model(), student.model())?;
    let posthoc = cfg
        .probes
        .posthoc_class_deltas
        .iter()
        .map(|&delta| {
            Ok(PosthocPoint {
                delta,
                teacher_acc: perturbed_accuracy(teacher.model(), &t_read, &dirs[0], delta, test.labels())?,
                student_acc: perturbed_accuracy(student.model(), &s_read, &dirs[1], delta, test.labels())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let student_acc = match cfg.perturbation {
        Some(p) if p.target == PerturbTarget::PosthocClass => {
            perturbed_accuracy(student.model(), &s_read, &dirs[1], p.delta, test.labels())?
        }
        _ => s_read.acc,
    };

    let (t0, t1, s0, s1) = (teacher.init(), teacher.model(), student.start(), student.model());
    let head_cosines = HeadCosines {
        aux_teacher_student_init: pair_cosine(t1, s0, LayerId::AuxHead),
        aux_teacher_student_final: pair_cosine(t1, s1, LayerId::AuxHead),
        class_teacher_student_final: pair_cosine(t1, s1, LayerId::ClassHead),
        teacher_class_init_final: layer_cosine(t0, t1, LayerId::ClassHead),
        student_aux_init_final: layer_cosine(s0, s1, LayerId::AuxHead),
    };
    let update_cosines = match student.after_first_epoch() {
        Some(after) => Some(
            s0.layer_ids()
                .into_iter()
                .filter(|id| t0.params(*id).is_some())
                .map(|id| {
                    let c = match update_cosine(t0, t1, s0, after, id) {
                        Ok(c) => Some(c),
                        Err(Error::UndefinedCosine(_) | Error::Structural(_)) => None,
                        Err(e) => return Err(e),
                    };
                    Ok((s0.layer_name(id), c))
                })
                .collect::<Result<BTreeMap<_, _>>>()?,
        ),
        None => None,
    };

    Ok(RunReport {
        config_hash: cfg.hash(),
        seed,
        n_classes: cfg.n_classes(),
        aux_dim: cfg.aux_dim,
        noise_samples_per_epoch: cfg.noise.samples_per_epoch(),
        teacher_acc: t_read.acc,
        student_acc,
        student_acc_unperturbed: s_read.acc,
        teacher_epoch_losses: teacher.epoch_losses().to_vec(),
        student_epoch_losses: student.epoch_losses().to_vec(),
        aux_eval_losses: student.aux_eval_losses().to_vec(),
        teacher_relative_change: relative_change(t0, t1),
        student_relative_change: relative_change(s0, s1),
        head_cosines,
        update_cosines,
        posthoc,
        teacher_probe: t_read.probe,
        student_probe: s_read.probe,
        wall_time_s: 0.0,
    })
}

fn pair_cosine(a: &SplitHeadModel, b: &SplitHeadModel, id: LayerId) -> Option<f64> {
    layer_cosine(a, b, id)
}

/// Sidecar written next to a teacher checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub config_hash: String,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub test_acc: f64,
}

/// Writes `teacher_s<seed>.ckpt` and `teacher_s<seed>.json` into `dir`.
pub fn save_teacher(dir: &Path, cfg: &ExperimentConfig, seed: u64, teacher: &TrainedTeacher) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let ckpt = dir.join(format!("teacher_s{seed}.ckpt"));
    save_checkpoint(&ckpt, teacher.model(), &cfg.hash())?;
    let summary = TeacherSummary {
        config_hash: cfg.hash(),
        seed,
        epoch_losses: teacher.epoch_losses().to_vec(),
        test_acc: teacher.test_acc(),
    };
    std::fs::write(ckpt.with_extension("json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(ckpt)
}

/// Loads a teacher written by [`save_teacher`] for use with `cfg`. The seed
/// is taken from the sidecar.
pub fn load_teacher(ckpt: &Path, cfg: &ExperimentConfig, test: &DatasetSplit) -> Result<(TrainedTeacher, u64)> {
    let (mut model, _) = load_checkpoint(ckpt)?;
    let sidecar = ckpt.with_extension("json");
    let summary: TeacherSummary = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
    for id in model.layer_ids() {
        model.set_trainable(id, cfg.teacher.is_trainable(id));
    }
    let t = TrainedTeacher::from_trained(cfg, summary.seed, model, summary.epoch_losses, test)?;
    Ok((t, summary.seed))
}

/// Train and test split held in memory.
pub struct Dataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

type TeacherSlot = Arc<Mutex<Option<Arc<TrainedTeacher>>>>;

/// Shared state across runs: loaded datasets and trained teachers.
///
/// Teachers are cached by everything that affects their training. The aux
/// width `m` is not part of the key: the aux head never receives gradient
/// during teacher training, so a cached teacher is reused with its aux head
/// redrawn from the same stream. This holds only without weight decay on a
/// trainable aux head, which [`Lab`] checks before caching.
#[derive(Default)]
pub struct Lab {
    data: Mutex<HashMap<String, Arc<Dataset>>>,
    teachers: Mutex<HashMap<String, TeacherSlot>>,
    no_teacher_cache: bool,
}

#[derive(Serialize)]
struct TeacherKey<'a> {
    data: &'a DataSpec,
    root: std::path::PathBuf,
    arch: &'a crate::nn::ArchSpec,
    trainable: Vec<bool>,
    epochs: usize,
    batch_size: usize,
    optimizer: &'a crate::optim::AdamConfig,
    seed: u64,
}

impl Lab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn without_teacher_cache() -> Self {
        Self {
            no_teacher_cache: true,
            ..Self::default()
        }
    }

    pub fn dataset(&self, spec: &DataSpec) -> Result<Arc<Dataset>> {
        let key = format!("{}|{}", serde_json::to_string(spec)?, spec.resolved_root().display());
        let mut data = self.data.lock().expect("data cache poisoned");
        if let Some(d) = data.get(&key) {
            return Ok(d.clone());
        }
        let (train, test) = spec.load()?;
        debug!("loaded dataset train={} test={}", train.len(), test.len());
        let d = Arc::new(Dataset { train, test });
        data.insert(key, d.clone());
        Ok(d)
    }

    fn teacher_key(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
        let t = &cfg.training;
        let mut data = cfg.data.clone();
        data.root = None;
        let layers = cfg.teacher.layer_count();
        let ids = (0..layers - 2)
            .map(LayerId::Feature)
            .chain([LayerId::ClassHead, LayerId::AuxHead]);
        let key = TeacherKey {
            data: &data,
            root: cfg.data.resolved_root(),
            arch: &cfg.teacher.arch,
            trainable: ids.map(|id| cfg.teacher.is_trainable(id)).collect(),
            epochs: t.teacher_epochs,
            batch_size: t.batch_size,
            optimizer: &t.optimizer,
            seed,
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }

    /// Trains (or reuses) the teacher for `(cfg, seed)`.
    pub fn teacher(&self, cfg: &ExperimentConfig, seed: u64, data: &Dataset) -> Result<Arc<TrainedTeacher>> {
        let cacheable = !self.no_teacher_cache
            && (cfg.training.optimizer.weight_decay == 0.0 || !cfg.teacher.is_trainable(LayerId::AuxHead));
        let train = || {
            let (teacher, _) = build_pair(cfg, seed)?;
            train_teacher(cfg, seed, teacher, &data.train, &data.test)
        };
        if !cacheable {
            return Ok(Arc::new(train()?));
        }
        let slot = {
            let mut map = self.teachers.lock().expect("teacher cache poisoned");
            map.entry(Self::teacher_key(cfg, seed)?).or_default().clone()
        };
        let mut guard = slot.lock().expect("teacher slot poisoned");
        let cached = match &*guard {
            Some(t) => t.clone(),
            None => {
                let t = Arc::new(train()?);
                *guard = Some(t.clone());
                t
            }
        };
        if cached.model().aux_dim() == cfg.aux_dim {
            Ok(cached)
        } else {
            debug!(
                "teacher cache hit seed={seed}; redrawing aux head for m={}",
                cfg.aux_dim
            );
            Ok(Arc::new(cached.with_aux_dim(cfg, seed)?))
        }
    }

    /// The whole pipeline for one seed.
    pub fn run(&self, cfg: &ExperimentConfig, seed: u64) -> Result<RunReport> {
        cfg.validate()?;
        let started = Instant::now();
        let data = self.dataset(&cfg.data)?;
        let teacher = self.teacher(cfg, seed, &data)?;
        let (_, student) = build_pair(cfg, seed)?;
        let prepared = prepare_student(cfg, seed, student, &teacher)?;
        let distilled = distill_student(cfg, seed, prepared, &teacher)?;
        let mut report = evaluate_run(cfg, seed, &teacher, &distilled, &data.test)?;
        report.wall_time_s = started.elapsed().as_secs_f64();
        info!(
            "run name={} seed={seed} teacher_acc={:.5} student_acc={:.5} wall_s={:.1}",
            cfg.name, report.teacher_acc, report.student_acc, report.wall_time_s
        );
        Ok(report)
    }
}

/// Runs one experiment with fresh caches.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunReport> {
    Lab::new().run(cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::InitTag;
    use crate::nn::ArchSpec;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::baseline(3);
        c.teacher.arch = ArchSpec::mlp(&[8, 6]);
        c.student.arch = ArchSpec::mlp(&[8, 6]);
        c
    }

    #[test]
    fn all_shared_pair_is_identical() {
        let (t, s) = build_pair(&cfg(), 4).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn random_layers_differ_and_shared_match() {
        let mut c = cfg();
        c.student.init = vec![InitTag::Random, InitTag::Random, InitTag::Shared, InitTag::Shared];
        let (t, s) = build_pair(&c, 4).unwrap();
        assert_ne!(t.params(LayerId::Feature(0)), s.params(LayerId::Feature(0)));
        assert_ne!(t.params(LayerId::Feature(1)), s.params(LayerId::Feature(1)));
        assert_eq!(t.params(LayerId::ClassHead), s.params(LayerId::ClassHead));
        assert_eq!(t.params(LayerId::AuxHead), s.params(LayerId::AuxHead));
        assert_eq!(build_pair(&c, 4).unwrap(), (t, s));
    }

    #[test]
    fn incompatible_shared_shapes_fail() {
        let mut c = cfg();
        c.student.arch = ArchSpec::mlp(&[5, 6]);
        assert!(matches!(build_pair(&c, 0), Err(Error::Structural(_))));
    }

    #[test]
    fn aux_redraw_matches_fresh_init() {
        let mut c = cfg();
        let (t, _) = build_pair(&c, 9).unwrap();
        let trained = TrainedTeacher {
            init: t.clone(),
            model: t,
            epoch_losses: vec![],
            test_acc: 0.0,
        };
        c.aux_dim = 7;
        let (fresh, _) = build_pair(&c, 9).unwrap();
        let redrawn = trained.with_aux_dim(&c, 9).unwrap();
        assert_eq!(redrawn.model(), &fresh);
        assert_eq!(redrawn.init(), &fresh);
    }
}
