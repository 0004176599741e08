//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use subliminal::data::{write_synthetic_mnist, DataSpec};
use subliminal::engine::ExperimentConfig;
use subliminal::nn::{
    cross_entropy, cross_entropy_backward, mse, mse_aux_backward, ArchSpec, GradientSet, LayerId, ModelSpec,
    SplitHeadModel,
};
use subliminal::rng::Rng;
use subliminal::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    AuxMse,
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub spec: ModelSpec,
    pub seed: u64,
    pub batch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradStats {
    pub checked: usize,
    /// Entries whose finite differences disagree across step sizes (a ReLU
    /// or max-pool kink inside the stencil).
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// A random small MLP or CNN drawn from `rng`.
pub fn random_case(rng: &mut Rng) -> GradCase {
    let n_classes = 2 + rng.below(3);
    let aux_dim = 1 + rng.below(4);
    let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 2 + rng.below(5)).collect();
    let spec = if rng.below(2) == 0 {
        ModelSpec {
            arch: ArchSpec::Mlp { hidden },
            input_shape: [1, 3 + rng.below(3), 3 + rng.below(3)],
            n_classes,
            aux_dim,
        }
    } else {
        let blocks = 1 + rng.below(2);
        let side = 4 + rng.below(5);
        ModelSpec {
            arch: ArchSpec::Cnn {
                channels: (0..blocks).map(|_| 1 + rng.below(3)).collect(),
                pools: (0..blocks).map(|_| 1 + rng.below(2)).collect(),
                hidden,
            },
            input_shape: [1 + rng.below(2), side, side],
            n_classes,
            aux_dim,
        }
    };
    GradCase {
        spec,
        seed: rng.next_u64(),
        batch: 1 + rng.below(4),
    }
}

fn loss_only(model: &SplitHeadModel, kind: LossKind, x: &Tensor, labels: &[usize], target: &Tensor) -> f64 {
    match kind {
        LossKind::CrossEntropy => cross_entropy(&model.class_logits(x).unwrap(), labels).unwrap().0,
        LossKind::AuxMse => mse(&model.aux_outputs(x).unwrap(), target).unwrap().0,
    }
}

/// Central finite differences against the analytic gradient for a sample of
/// entries of every layer. Relative error is `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn check_gradients(case: &GradCase, kind: LossKind, per_layer: usize) -> GradStats {
    let mut rng = Rng::new(case.seed);
    let model = SplitHeadModel::init(&case.spec, |id| Rng::with_stream(case.seed, id.stream_index() + 1)).unwrap();
    let len = case.spec.input_len();
    let x = Tensor::new(
        vec![case.batch, len],
        (0..case.batch * len).map(|_| rng.standard_normal()).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..case.batch).map(|_| rng.below(case.spec.n_classes)).collect();
    let target = Tensor::new(
        vec![case.batch, case.spec.aux_dim],
        (0..case.batch * case.spec.aux_dim)
            .map(|_| rng.standard_normal())
            .collect(),
    )
    .unwrap();
    let grads: GradientSet = match kind {
        LossKind::CrossEntropy => cross_entropy_backward(&model, &x, &labels).unwrap().1,
        LossKind::AuxMse => mse_aux_backward(&model, &x, &target).unwrap().1,
    };

    let fd = |id: LayerId, is_bias: bool, idx: usize, h: f64| {
        let eval = |delta: f64| {
            let mut m = model.clone();
            let (w, b) = m.params(id).unwrap();
            let (mut w, mut b) = (w.clone(), b.clone());
            let t = if is_bias { &mut b } else { &mut w };
            let mut data = t.data().to_vec();
            data[idx] += delta;
            *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            m.set_params(id, w, b).unwrap();
            loss_only(&m, kind, &x, &labels, &target)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    };
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);

    let mut stats = GradStats::default();
    for id in model.layer_ids() {
        let g = grads.get(id).expect("all layers trainable");
        for (is_bias, analytic) in [(false, &g.weight), (true, &g.bias)] {
            let n = analytic.len();
            for _ in 0..per_layer.min(n) {
                let idx = rng.below(n);
                let a = analytic.data()[idx];
                let f = fd(id, is_bias, idx, 1e-5);
                let err = rel(a, f);
                if err >= 1e-4 {
                    let (f_small, f_large) = (fd(id, is_bias, idx, 1e-6), fd(id, is_bias, idx, 1e-4));
                    if rel(f_small, f_large) > 1e-3 {
                        stats.skipped += 1;
                        continue;
                    }
                }
                stats.checked += 1;
                stats.max_rel_err = stats.max_rel_err.max(err);
            }
        }
    }
    stats
}

/// Directory holding `mnist/`: `$SUBLIMINAL_DATA_ROOT`, else the workspace `data/`.
pub fn mnist_root() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("SUBLIMINAL_DATA_ROOT").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")),
    ];
    candidates.into_iter().flatten().find(|root| {
        DataSpec {
            root: Some(root.clone()),
            ..DataSpec::default()
        }
        .check_available()
        .is_ok()
    })
}

/// Synthetic MNIST-shaped data in a temp dir.
pub fn synthetic_root(n_train: usize, n_test: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_mnist(dir.path(), n_train, n_test, 11).unwrap();
    dir
}

/// A config small enough to run in well under a second.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::baseline(3);
    c.data.root = Some(root.to_path_buf());
    c.teacher.arch = ArchSpec::mlp(&[16, 12]);
    c.student.arch = ArchSpec::mlp(&[16, 12]);
    c.training.teacher_epochs = 2;
    c.training.student_epochs = 2;
    c.training.batch_size = 50;
    c.training.eval_noise_batches = 2;
    c.training.eval_noise_batch_size = 50;
    c.noise.batch_size = 50;
    c.noise.steps_per_epoch = 4;
    c
}

pub fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}
