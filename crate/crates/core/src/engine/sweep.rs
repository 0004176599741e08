//! Grid expansion, resumable multi-seed execution and the on-disk results store.
//!
//! Layout of an output directory:
//! `runs/<hash>_s<seed>.json` (one [`RunRecord`] each), `results.csv`
//! (one row per record, sorted by key) and `configs.json` (hash -> config).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rayon::prelude::*;
use serde_json::Value;

use super::config::{ExperimentConfig, InitTag, ModelSide, NAMED_AXES};
use super::pipeline::Lab;
use super::report::{record_file_name, RunRecord, RunStatus};
use crate::error::{Error, FieldError, Result};
use crate::nn::ArchSpec;
use crate::noise::NoiseKind;

/// One grid point: its coordinates and the resulting config.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub axes: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config(vec![FieldError::new(field, message)])
}

fn as_usize(name: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| config_err(name, format!("expected a non-negative integer, got {v}")))
}

/// Resizes the feature part of init/trainable lists after a depth change,
/// repeating the first feature entry.
fn resize_side(side: &mut ModelSide, old_features: usize) {
    let new_features = side.arch.feature_layers();
    fn resize<T: Copy>(list: &mut Vec<T>, old: usize, new: usize) {
        if list.is_empty() || list.len() != old + 2 {
            return;
        }
        let heads = list.split_off(old);
        let fill = list[0];
        list.resize(new, fill);
        list.extend(heads);
    }
    resize::<InitTag>(&mut side.init, old_features, new_features);
    resize::<bool>(&mut side.trainable, old_features, new_features);
}

fn set_last_width(arch: &mut ArchSpec, d: usize) {
    let (ArchSpec::Mlp { hidden } | ArchSpec::Cnn { hidden, .. }) = arch;
    if let Some(last) = hidden.last_mut() {
        *last = d;
    }
}

/// Applies one axis value. Named axes:
/// `m` aux width; `N` noise samples per epoch (must be a multiple of the
/// noise batch size); `d` last hidden width of both models; `delta`
/// perturbation scale; `n_classes`; `depth`, `width`, `arch` the student's
/// hidden depth, first-layer width and architecture; `perlin_resolution`
/// (switches to Perlin noise). Any other name is a dotted config path.
pub fn apply_axis(cfg: &mut ExperimentConfig, name: &str, value: &Value) -> Result<()> {
    match name {
        "m" => cfg.aux_dim = as_usize(name, value)?,
        "N" => {
            let n = as_usize(name, value)?;
            let b = cfg.noise.batch_size;
            if b == 0 || n == 0 || n % b != 0 {
                return Err(config_err(
                    name,
                    format!("N={n} is not a positive multiple of the noise batch size {b}"),
                ));
            }
            cfg.noise.steps_per_epoch = n / b;
        }
        "d" => {
            let d = as_usize(name, value)?;
            set_last_width(&mut cfg.teacher.arch, d);
            set_last_width(&mut cfg.student.arch, d);
        }
        "delta" => {
            let delta = value
                .as_f64()
                .ok_or_else(|| config_err(name, format!("expected a number, got {value}")))?;
            match &mut cfg.perturbation {
                Some(p) => p.delta = delta,
                None => return Err(config_err(name, "delta axis needs a [perturbation] section")),
            }
        }
        "n_classes" => cfg.data.n_classes = Some(as_usize(name, value)?),
        "depth" => {
            let depth = as_usize(name, value)?;
            let old = cfg.student.arch.feature_layers();
            let d = cfg.student.arch.latent_dim();
            match &mut cfg.student.arch {
                ArchSpec::Mlp { hidden } => *hidden = vec![d; depth],
                ArchSpec::Cnn { .. } => return Err(config_err(name, "depth axis applies to MLP students")),
            }
            resize_side(&mut cfg.student, old);
        }
        "width" => {
            let w = as_usize(name, value)?;
            match &mut cfg.student.arch {
                ArchSpec::Mlp { hidden } | ArchSpec::Cnn { hidden, .. } if !hidden.is_empty() => hidden[0] = w,
                _ => return Err(config_err(name, "student has no hidden layer")),
            }
        }
        "arch" => {
            let old = cfg.student.arch.feature_layers();
            cfg.student.arch = match value {
                Value::String(s) if s == "cnn" => ArchSpec::student_cnn(),
                Value::String(s) if s == "mlp" => ArchSpec::mlp(&[256, 256]),
                other => serde_json::from_value(other.clone())
                    .map_err(|e| config_err(name, format!("not an architecture: {e}")))?,
            };
            resize_side(&mut cfg.student, old);
        }
        "perlin_resolution" => {
            cfg.noise.kind = NoiseKind::Perlin;
            cfg.noise.perlin_resolution = as_usize(name, value)?;
        }
        path => {
            let mut root = serde_json::to_value(&*cfg)?;
            let mut slot = &mut root;
            for part in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| config_err(path, format!("no config field {part:?}")))?;
            }
            *slot = value.clone();
            *cfg = serde_json::from_value(root).map_err(|e| config_err(path, e.to_string()))?;
        }
    }
    Ok(())
}

/// Cartesian product of the config's sweep axes (first axis varies slowest).
/// Points that resolve to the same config are kept once.
pub fn expand(base: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let mut points = vec![SweepPoint {
        axes: BTreeMap::new(),
        config: ExperimentConfig {
            sweep: Default::default(),
            ..base.clone()
        },
    }];
    for axis in &base.sweep.axes {
        if !NAMED_AXES.contains(&axis.name.as_str()) && !axis.name.contains('.') {
            return Err(config_err("sweep.axis", format!("unknown axis {:?}", axis.name)));
        }
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                apply_axis(&mut q.config, &axis.name, v)?;
                q.axes.insert(axis.name.clone(), v.clone());
                next.push(q);
            }
        }
        points = next;
    }
    let mut seen = BTreeSet::new();
    points.retain(|p| seen.insert(p.config.hash()));
    for p in &points {
        p.config.validate()?;
    }
    Ok(points)
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub jobs: usize,
    /// Overrides the config's seed list.
    pub seeds: Option<Vec<u64>>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { jobs: 1, seeds: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepSummary {
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Runs every (grid point, seed) not already completed in `out_dir`.
/// Failed runs are recorded with an error status and the sweep continues.
pub fn run_sweep(lab: &Lab, base: &ExperimentConfig, out_dir: &Path, opts: &SweepOptions) -> Result<SweepSummary> {
    let points = expand(base)?;
    let seeds = opts.seeds.clone().unwrap_or_else(|| base.seeds.clone());
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;

    let mut summary = SweepSummary::default();
    let mut todo = Vec::new();
    for p in &points {
        for &seed in &seeds {
            let path = runs_dir.join(record_file_name(&p.config.hash(), seed));
            match read_record(&path) {
                Ok(r) if r.status == RunStatus::Ok => summary.skipped += 1,
                _ => todo.push((p, seed)),
            }
        }
    }
    info!(
        "sweep name={} points={} seeds={} todo={} skipped={}",
        base.name,
        points.len(),
        seeds.len(),
        todo.len(),
        summary.skipped
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<RunRecord>();
    let write_result = std::thread::scope(|s| {
        s.spawn(move || {
            pool.install(|| {
                todo.par_iter().for_each_with(tx, |tx, (p, seed)| {
                    let _ = tx.send(execute(lab, p, *seed));
                })
            })
        });
        // Single writer: records are written as they complete.
        let mut result = Ok(());
        for record in rx {
            if record.status == RunStatus::Ok {
                summary.executed += 1;
            } else {
                summary.failed += 1;
                warn!(
                    "run failed hash={} seed={} error={}",
                    record.config_hash,
                    record.seed,
                    record.error.as_deref().unwrap_or("")
                );
            }
            if let Err(e) = write_record(&runs_dir, &record) {
                result = Err(e);
            }
        }
        result
    });
    write_result?;
    write_results(out_dir)?;
    Ok(summary)
}

fn execute(lab: &Lab, p: &SweepPoint, seed: u64) -> RunRecord {
    let result = lab.run(&p.config, seed);
    let (status, error, report) = match result {
        Ok(r) => (RunStatus::Ok, None, Some(r)),
        Err(e) => (RunStatus::Error, Some(e.to_string()), None),
    };
    RunRecord {
        config_hash: p.config.hash(),
        seed,
        axes: p.axes.clone(),
        status,
        error,
        config: p.config.clone(),
        report,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_record(runs_dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    fs::create_dir_all(runs_dir)?;
    let path = runs_dir.join(record.file_name());
    write_atomic(&path, &serde_json::to_vec_pretty(record)?)?;
    Ok(path)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// All records in `dir/runs` (or in `dir` itself), sorted by key.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = dir.join("runs");
    let source = if runs.is_dir() { runs } else { dir.to_path_buf() };
    let mut records = Vec::new();
    if source.is_dir() {
        for entry in fs::read_dir(&source)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                match read_record(&path) {
                    Ok(r) => records.push(r),
                    Err(e) => warn!("skipping {}: {e}", path.display()),
                }
            }
        }
    }
    records.sort_by_key(RunRecord::key);
    Ok(records)
}

/// Fixed leading columns of `results.csv`; axis columns (`axis.<name>`) follow.
pub const RESULT_COLUMNS: &[&str] = &[
    "config_hash",
    "seed",
    "name",
    "figure",
    "status",
    "error",
    "n_classes",
    "aux_dim",
    "noise_samples_per_epoch",
    "teacher_acc",
    "student_acc",
    "student_acc_unperturbed",
    "aux_eval_loss_init",
    "aux_eval_loss_final",
    "wall_time_s",
];

pub(crate) fn axis_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Rewrites `results.csv` and `configs.json` from the records in `dir/runs`.
pub fn write_results(dir: &Path) -> Result<()> {
    let records = load_records(dir)?;
    let axis_names: BTreeSet<&String> = records.iter().flat_map(|r| r.axes.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = RESULT_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(axis_names.iter().map(|a| format!("axis.{a}")))
        .collect();
    w.write_record(&header)?;
    for r in &records {
        let num =
            |f: &dyn Fn(&super::RunReport) -> f64| r.report.as_ref().map(|x| f(x).to_string()).unwrap_or_default();
        let mut row = vec![
            r.config_hash.clone(),
            r.seed.to_string(),
            r.config.name.clone(),
            r.config.figure.clone(),
            match r.status {
                RunStatus::Ok => "ok".into(),
                RunStatus::Error => "error".into(),
            },
            r.error.clone().unwrap_or_default(),
            r.config.n_classes().to_string(),
            r.config.aux_dim.to_string(),
            r.config.noise.samples_per_epoch().to_string(),
            num(&|x| x.teacher_acc),
            num(&|x| x.student_acc),
            num(&|x| x.student_acc_unperturbed),
            num(&|x| x.aux_eval_loss_init()),
            num(&|x| x.aux_eval_loss_final()),
            num(&|x| x.wall_time_s),
        ];
        row.extend(
            axis_names
                .iter()
                .map(|a| r.axes.get(*a).map(axis_cell).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join("results.csv"), &bytes)?;

    let configs: BTreeMap<&String, &ExperimentConfig> = records.iter().map(|r| (&r.config_hash, &r.config)).collect();
    write_atomic(&dir.join("configs.json"), &serde_json::to_vec_pretty(&configs)?)?;
    Ok(())
}
