//! Small MNIST-shaped IDX datasets for offline smoke runs and tests.
//!
//! Class `k` is a bright 6x6 block at one of ten fixed positions plus pixel
//! noise, so a small network separates the classes within an epoch.

use std::fs;
use std::path::Path;

use super::idx::{write_idx, RawSplit};
use super::DatasetKind;
use crate::error::Result;
use crate::rng::Rng;

fn split(n: usize, rng: &mut Rng) -> RawSplit {
    let (rows, cols) = (28, 28);
    let mut pixels = Vec::with_capacity(n * rows * cols);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        let (r0, c0) = (3 + 8 * (label as usize / 4), 2 + 6 * (label as usize % 4));
        for r in 0..rows {
            for c in 0..cols {
                let inside = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&c);
                let base = if inside { 200.0 } else { 10.0 };
                let v = base + 40.0 * rng.standard_normal();
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(label);
    }
    RawSplit {
        pixels,
        labels,
        rows,
        cols,
    }
}

/// Writes `root/mnist/{train,t10k}-*` IDX files with `n_train` and `n_test`
/// samples, classes cycling 0..10.
pub fn write_synthetic_mnist(root: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    let dir = root.join(DatasetKind::Mnist.dir_name());
    fs::create_dir_all(&dir)?;
    let [tri, trl, tei, tel] = DatasetKind::Mnist.file_names();
    let mut rng = Rng::new(seed);
    write_idx(&split(n_train, &mut rng), &dir.join(tri), &dir.join(trl))?;
    write_idx(&split(n_test, &mut rng), &dir.join(tei), &dir.join(tel))?;
    Ok(())
}
