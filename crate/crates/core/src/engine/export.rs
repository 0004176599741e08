//! Tidy per-figure summaries and theory-vs-measurement tables.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::PerturbTarget;
use super::report::{RunRecord, RunReport, RunStatus};
use super::seeds::Stream;
use super::stats::{bootstrap_ci, mean};
use super::sweep::axis_cell;
use crate::error::{Error, Result};
use crate::theory::{accuracy_under_class_perturbation, alignment_upper_bound, shear_ratio, TheoryInputs};

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const CI_LEVEL: f64 = 0.95;

/// Axis added to post-hoc perturbation metrics.
pub const POSTHOC_AXIS: &str = "posthoc_delta";

/// Metric name and value, with the extra axis it carries if any.
type Metric = (Option<(&'static str, f64)>, String, f64);

/// Named scalar metrics of one report.
fn metrics(r: &RunReport) -> Vec<Metric> {
    let mut out = vec![
        (None, "teacher_acc".to_string(), r.teacher_acc),
        (None, "student_acc".to_string(), r.student_acc),
        (None, "student_acc_unperturbed".to_string(), r.student_acc_unperturbed),
        (None, "aux_eval_loss_init".to_string(), r.aux_eval_loss_init()),
        (None, "aux_eval_loss_final".to_string(), r.aux_eval_loss_final()),
    ];
    for (who, map) in [
        ("teacher", &r.teacher_relative_change),
        ("student", &r.student_relative_change),
    ] {
        out.extend(
            map.iter()
                .map(|(layer, v)| (None, format!("rel_change.{who}.{layer}"), *v)),
        );
    }
    let h = &r.head_cosines;
    for (name, v) in [
        ("aux_teacher_student_init", h.aux_teacher_student_init),
        ("aux_teacher_student_final", h.aux_teacher_student_final),
        ("class_teacher_student_final", h.class_teacher_student_final),
        ("teacher_class_init_final", h.teacher_class_init_final),
        ("student_aux_init_final", h.student_aux_init_final),
    ] {
        if let Some(v) = v {
            out.push((None, format!("head_cos.{name}"), v));
        }
    }
    if let Some(u) = &r.update_cosines {
        out.extend(
            u.iter()
                .filter_map(|(l, c)| c.map(|c| (None, format!("update_cos.{l}"), c))),
        );
    }
    for p in &r.posthoc {
        out.push((
            Some((POSTHOC_AXIS, p.delta)),
            "posthoc.teacher_acc".into(),
            p.teacher_acc,
        ));
        out.push((
            Some((POSTHOC_AXIS, p.delta)),
            "posthoc.student_acc".into(),
            p.student_acc,
        ));
    }
    out
}

/// Orders axis cells numerically where both parse as numbers.
fn cmp_cells(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

fn cmp_rows(a: &[String], b: &[String]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cmp_cells(x, y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Bootstrap summary; the generator is keyed by the group so output does not
/// depend on row order.
pub fn summarize(group_key: &str, values: &[f64]) -> (usize, f64, Option<(f64, f64)>) {
    let m = mean(values);
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return (values.len(), m, None);
    }
    let digest = Sha256::digest(group_key.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let ci = bootstrap_ci(values, BOOTSTRAP_RESAMPLES, CI_LEVEL, &mut Stream::Bootstrap.rng(seed))
        .ok()
        .map(|(_, lo, hi)| (lo, hi));
    (values.len(), m, ci)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Writes `<figure>.csv` for every figure tag among the successful records:
/// `figure,label,<axis columns>,metric,n,mean,ci_lo,ci_hi`, one row per
/// (label, axis values, metric) summarizing over seeds.
pub fn export_figures(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ok: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok && r.report.is_some())
        .collect();
    if ok.is_empty() {
        return Err(Error::Data("no successful run records to export".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut by_figure: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in ok {
        let fig = if r.config.figure.is_empty() {
            "misc"
        } else {
            &r.config.figure
        };
        by_figure.entry(fig.to_string()).or_default().push(r);
    }
    let mut written = Vec::new();
    for (figure, recs) in by_figure {
        let mut axis_names: BTreeSet<String> = recs.iter().flat_map(|r| r.axes.keys().cloned()).collect();
        if recs.iter().any(|r| !r.report.as_ref().unwrap().posthoc.is_empty()) {
            axis_names.insert(POSTHOC_AXIS.into());
        }
        let axis_names: Vec<String> = axis_names.into_iter().collect();
        // (label, axis cells..., metric) -> values over seeds
        let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
        for r in &recs {
            let report = r.report.as_ref().unwrap();
            for (extra, metric, value) in metrics(report) {
                let mut key = vec![r.config.name.clone()];
                for a in &axis_names {
                    let cell = match extra {
                        Some((name, v)) if name == a => fmt(v),
                        _ => r.axes.get(a).map(axis_cell).unwrap_or_default(),
                    };
                    key.push(cell);
                }
                key.push(metric);
                groups.entry(key).or_default().push(value);
            }
        }
        let mut keys: Vec<&Vec<String>> = groups.keys().collect();
        keys.sort_by(|a, b| cmp_rows(a, b));

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["figure".to_string(), "label".to_string()];
        header.extend(axis_names.iter().cloned());
        header.extend(["metric", "n", "mean", "ci_lo", "ci_hi"].map(String::from));
        w.write_record(&header)?;
        for key in keys {
            let values = &groups[key];
            let group_key = format!("{figure}|{}", key.join("|"));
            let (n, m, ci) = summarize(&group_key, values);
            let mut row = vec![figure.clone()];
            row.extend(key.iter().cloned());
            row.push(n.to_string());
            row.push(fmt(m));
            row.push(ci.map(|c| fmt(c.0)).unwrap_or_default());
            row.push(ci.map(|c| fmt(c.1)).unwrap_or_default());
            w.write_record(&row)?;
        }
        let path = out_dir.join(format!("{figure}.csv"));
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub label: String,
    /// Hash of the `delta = 0` config; rows sharing it form one delta sweep.
    pub group: String,
    pub aux_dim: usize,
    pub seed: u64,
    pub layer: String,
    pub delta: f64,
    pub d: usize,
    pub beta_hat: f64,
    pub r: f64,
    /// Measured cosine of the same layer and seed at `delta = 0`.
    pub cos0: f64,
    pub bound: f64,
    pub measured: f64,
    /// Half-width of the bootstrap CI of the seed-mean measured cosine at
    /// this (group, layer, delta).
    pub ci_half_width: f64,
    /// This seed alone lies above `bound + 2 * ci_half_width`.
    pub exceeds: bool,
}

/// Pairs every aux-perturbation run that has update cosines with its
/// `delta = 0` sibling (same config otherwise, same seed) and compares the
/// measured cosine with `cos0 / sqrt(1 + r^2)`, one row per seed.
pub fn alignment_table(records: &[RunRecord]) -> Result<Vec<AlignmentRow>> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let by_key: BTreeMap<(String, u64), &RunRecord> = ok.iter().map(|r| (r.key(), *r)).collect();
    let mut rows = Vec::new();
    for r in &ok {
        let (Some(report), Some(p)) = (&r.report, r.config.perturbation) else {
            continue;
        };
        let Some(cosines) = &report.update_cosines else {
            continue;
        };
        if p.target != PerturbTarget::StudentAux {
            continue;
        }
        let mut base = r.config.clone();
        base.perturbation.as_mut().expect("checked").delta = 0.0;
        let group = base.hash();
        let Some(sibling) = by_key.get(&(group.clone(), r.seed)).and_then(|s| s.report.as_ref()) else {
            continue;
        };
        let Some(base_cos) = &sibling.update_cosines else {
            continue;
        };
        let d = report.student_probe.latent_dim;
        let beta = report.teacher_probe.beta_hat;
        let ratio = shear_ratio(d, p.delta, beta)?;
        for (layer, measured) in cosines {
            if layer.ends_with("head") {
                continue;
            }
            let (Some(measured), Some(Some(cos0))) = (measured, base_cos.get(layer)) else {
                continue;
            };
            rows.push(AlignmentRow {
                label: r.config.name.clone(),
                group: group.clone(),
                aux_dim: r.config.aux_dim,
                seed: r.seed,
                layer: layer.clone(),
                delta: p.delta,
                d,
                beta_hat: beta,
                r: ratio,
                cos0: *cos0,
                bound: alignment_upper_bound(*cos0, ratio)?,
                measured: *measured,
                ci_half_width: 0.0,
                exceeds: false,
            });
        }
    }
    let mut groups: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        groups.entry(row.group_key()).or_default().push(row.measured);
    }
    for row in &mut rows {
        let key = row.group_key();
        let (_, _, ci) = summarize(&format!("alignment|{}|{}|{}", key.0, key.1, row.delta), &groups[&key]);
        row.ci_half_width = ci.map(|(lo, hi)| (hi - lo) / 2.0).unwrap_or(0.0);
        row.exceeds = row.measured > row.bound + 2.0 * row.ci_half_width;
    }
    rows.sort_by(|a, b| {
        (a.label.as_str(), a.aux_dim, a.group.as_str(), a.layer.as_str())
            .cmp(&(b.label.as_str(), b.aux_dim, b.group.as_str(), b.layer.as_str()))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

impl AlignmentRow {
    fn group_key(&self) -> (String, String, u64) {
        (self.group.clone(), self.layer.clone(), self.delta.to_bits())
    }
}

/// Seed-mean comparison at one point of a delta sweep. The bound describes
/// the expected cosine over runs, so this is the level at which it is tested.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentSummary {
    pub label: String,
    pub group: String,
    pub aux_dim: usize,
    pub layer: String,
    pub delta: f64,
    pub n: usize,
    pub r: f64,
    pub cos0_mean: f64,
    pub bound_mean: f64,
    pub measured_mean: f64,
    pub ci_half_width: f64,
    /// Seeds individually above `bound + 2 * ci_half_width`.
    pub seeds_exceeding: usize,
    /// `measured_mean > bound_mean + 2 * ci_half_width`.
    pub exceeds: bool,
}

/// Aggregates an alignment table over seeds, in the table's order.
pub fn alignment_summary(rows: &[AlignmentRow]) -> Vec<AlignmentSummary> {
    let mut out: Vec<AlignmentSummary> = Vec::new();
    let mut index: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
    for row in rows {
        let i = *index.entry(row.group_key()).or_insert_with(|| {
            out.push(AlignmentSummary {
                label: row.label.clone(),
                group: row.group.clone(),
                aux_dim: row.aux_dim,
                layer: row.layer.clone(),
                delta: row.delta,
                n: 0,
                r: row.r,
                cos0_mean: 0.0,
                bound_mean: 0.0,
                measured_mean: 0.0,
                ci_half_width: row.ci_half_width,
                seeds_exceeding: 0,
                exceeds: false,
            });
            out.len() - 1
        });
        let s = &mut out[i];
        s.n += 1;
        s.cos0_mean += row.cos0;
        s.bound_mean += row.bound;
        s.measured_mean += row.measured;
        s.seeds_exceeding += row.exceeds as usize;
    }
    for s in &mut out {
        let n = s.n as f64;
        s.cos0_mean /= n;
        s.bound_mean /= n;
        s.measured_mean /= n;
        s.exceeds = s.measured_mean > s.bound_mean + 2.0 * s.ci_half_width;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassPerturbationRow {
    pub label: String,
    pub seed: u64,
    pub model: &'static str,
    pub delta: f64,
    pub measured: f64,
    pub predicted: Option<f64>,
    pub base_acc: f64,
    pub alpha: f64,
    pub s: Option<f64>,
    pub v: f64,
    pub d: usize,
}

/// Post-hoc class-head perturbation points with the closed-form prediction
/// from each model's estimated `alpha`, `s` and `V`.
pub fn class_perturbation_table(records: &[RunRecord]) -> Vec<ClassPerturbationRow> {
    let mut rows = Vec::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Ok) {
        let Some(report) = &r.report else { continue };
        for (model, probe, base_acc) in [
            ("teacher", &report.teacher_probe, report.teacher_acc),
            ("student", &report.student_probe, report.student_acc_unperturbed),
        ] {
            for p in &report.posthoc {
                let predicted = probe.s.and_then(|s| {
                    accuracy_under_class_perturbation(&TheoryInputs {
                        d: probe.latent_dim,
                        m: report.aux_dim,
                        n: report.n_classes,
                        delta: p.delta,
                        beta: probe.beta_hat,
                        alpha: probe.alpha,
                        s,
                        v: probe.v,
                    })
                    .ok()
                });
                rows.push(ClassPerturbationRow {
                    label: r.config.name.clone(),
                    seed: r.seed,
                    model,
                    delta: p.delta,
                    measured: if model == "teacher" {
                        p.teacher_acc
                    } else {
                        p.student_acc
                    },
                    predicted,
                    base_acc,
                    alpha: probe.alpha,
                    s: probe.s,
                    v: probe.v,
                    d: probe.latent_dim,
                });
            }
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

/// Writes `theory_alignment.csv`, `theory_alignment_summary.csv` and
/// `theory_class_perturbation.csv`.
/// Returns the paths written (a table with no rows is skipped).
pub fn write_theory_tables(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let align = alignment_table(records)?;
    if !align.is_empty() {
        let p = out_dir.join("theory_alignment.csv");
        write_csv(&p, &align)?;
        written.push(p);
        let p = out_dir.join("theory_alignment_summary.csv");
        write_csv(&p, &alignment_summary(&align))?;
        written.push(p);
    }
    let class = class_perturbation_table(records);
    if !class.is_empty() {
        let p = out_dir.join("theory_class_perturbation.csv");
        write_csv(&p, &class)?;
        written.push(p);
    }
    Ok(written)
}
