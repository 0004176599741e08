//! MNIST / EMNIST loading, normalization and batching.

mod dataset;
mod fetch;
mod idx;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{emnist_subset, epoch_batches, normalize, DatasetSplit, Normalization};
pub use fetch::{fetch_dataset, fetch_file, sha256_hex, FetchOptions, Manifest, ManifestEntry};
pub use idx::{encode_images, encode_labels, load_idx, parse_images, parse_labels, read_maybe_gz, write_idx, RawSplit};
pub use synthetic::write_synthetic_mnist;

/// Environment variable consulted when a config does not set a data root.
pub const DATA_ROOT_ENV: &str = "SUBLIMINAL_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    /// The balanced EMNIST split (47 classes).
    EmnistBalanced,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::EmnistBalanced => "emnist",
        }
    }

    /// `(train images, train labels, test images, test labels)` file stems.
    pub fn file_names(self) -> [&'static str; 4] {
        match self {
            DatasetKind::Mnist => [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ],
            DatasetKind::EmnistBalanced => [
                "emnist-balanced-train-images-idx3-ubyte",
                "emnist-balanced-train-labels-idx1-ubyte",
                "emnist-balanced-test-images-idx3-ubyte",
                "emnist-balanced-test-labels-idx1-ubyte",
            ],
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            DatasetKind::Mnist => 10,
            DatasetKind::EmnistBalanced => 47,
        }
    }
}

/// Which data a run uses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub dataset: DatasetKind,
    /// Directory holding `mnist/` and `emnist/`; falls back to
    /// `$SUBLIMINAL_DATA_ROOT`, then `./data`.
    pub root: Option<PathBuf>,
    /// Restrict to the first `n` class ids (relabelled `0..n`).
    pub n_classes: Option<usize>,
    /// Use only the first `k` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl DataSpec {
    pub fn resolved_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn dir(&self) -> PathBuf {
        self.resolved_root().join(self.dataset.dir_name())
    }

    pub fn class_count(&self) -> usize {
        self.n_classes.unwrap_or(self.dataset.class_count())
    }

    /// Paths of the four IDX files, preferring raw over `.gz` when both exist.
    pub fn files(&self) -> Result<[PathBuf; 4]> {
        let dir = self.dir();
        let mut out: [PathBuf; 4] = Default::default();
        for (slot, name) in out.iter_mut().zip(self.dataset.file_names()) {
            *slot = find_file(&dir, name).ok_or_else(|| {
                Error::Data(format!(
                    "missing dataset file {}/{name}[.gz]; run `fetch-data` or set {DATA_ROOT_ENV}",
                    dir.display()
                ))
            })?;
        }
        Ok(out)
    }

    pub fn check_available(&self) -> Result<()> {
        self.files().map(|_| ())
    }

    /// Loads, normalizes, subsets and truncates `(train, test)`.
    pub fn load(&self) -> Result<(DatasetSplit, DatasetSplit)> {
        let [tri, trl, tei, tel] = self.files()?;
        let prepare = |images: &Path, labels: &Path, limit: Option<usize>| -> Result<DatasetSplit> {
            let mut raw = load_idx(images, labels)?;
            if self.dataset == DatasetKind::EmnistBalanced {
                raw.transpose_images();
            }
            let mut split = normalize(&raw, Normalization::MNIST)?.with_class_count(self.dataset.class_count())?;
            if let Some(n) = self.n_classes {
                split = emnist_subset(&split, n)?;
            }
            Ok(match limit {
                Some(k) => split.head(k),
                None => split,
            })
        };
        Ok((
            prepare(&tri, &trl, self.train_limit)?,
            prepare(&tei, &tel, self.test_limit)?,
        ))
    }
}

fn find_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}
