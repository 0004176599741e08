use serde::{Deserialize, Serialize};

use super::idx::RawSplit;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-pixel affine normalization applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const MNIST: Normalization = Normalization {
        mean: 0.1307,
        std: 0.3081,
    };

    pub fn apply(&self, pixel: u8) -> f64 {
        (pixel as f64 / 255.0 - self.mean) / self.std
    }
}

/// A normalized split. Only [`normalize`] produces one, so pixels cannot be
/// normalized twice.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    normalization: Normalization,
    image_shape: [usize; 3],
}

pub fn normalize(raw: &RawSplit, norm: Normalization) -> Result<DatasetSplit> {
    let table: Vec<f64> = (0..=255u8).map(|p| norm.apply(p)).collect();
    let pixels = raw.pixels.iter().map(|&p| table[p as usize]).collect();
    let n_classes = raw.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(DatasetSplit {
        images: Tensor::new(vec![raw.len(), raw.rows * raw.cols], pixels)?,
        labels: raw.labels.iter().map(|&l| l as usize).collect(),
        n_classes,
        normalization: norm,
        image_shape: [1, raw.rows, raw.cols],
    })
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `N x (H*W)` normalized pixels.
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Declares the class count (e.g. 10 for MNIST even if a slice misses a digit).
    pub fn with_class_count(mut self, n: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n) {
            return Err(Error::Data(format!("label {bad} does not fit {n} classes")));
        }
        self.n_classes = n;
        Ok(self)
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width = self.images.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), width], data), labels)
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        let (images, labels) = self.gather(&(0..n).collect::<Vec<_>>());
        DatasetSplit {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> DatasetSplit {
        DatasetSplit {
            images: Tensor::zeros(&[0, 0]),
            labels: Vec::new(),
            n_classes: self.n_classes,
            normalization: self.normalization,
            image_shape: self.image_shape,
        }
    }

    /// Mean of every normalized pixel.
    pub fn pixel_mean(&self) -> f64 {
        self.images.data().iter().sum::<f64>() / self.images.len().max(1) as f64
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Keeps samples of the first `n_classes` class ids and relabels them by
/// rank to `0..n_classes`.
pub fn emnist_subset(split: &DatasetSplit, n_classes: usize) -> Result<DatasetSplit> {
    if n_classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {n_classes}")));
    }
    let mut present: Vec<usize> = split.labels.clone();
    present.sort_unstable();
    present.dedup();
    if n_classes > present.len() {
        return Err(Error::Parameter(format!(
            "asked for {n_classes} classes, split has {}",
            present.len()
        )));
    }
    let kept = &present[..n_classes];
    let indices: Vec<usize> = (0..split.len())
        .filter(|&i| kept.binary_search(&split.labels[i]).is_ok())
        .collect();
    let (images, labels) = split.gather(&indices);
    let labels = labels
        .into_iter()
        .map(|l| kept.binary_search(&l).expect("kept label"))
        .collect();
    Ok(DatasetSplit {
        images,
        labels,
        n_classes,
        ..split.clone_meta()
    })
}

/// One epoch of shuffled mini-batches over `n` samples; the final partial
/// batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(labels: Vec<u8>) -> RawSplit {
        RawSplit {
            pixels: labels.iter().flat_map(|&l| [l * 10, 255 - l, 0, 1]).collect(),
            labels,
            rows: 2,
            cols: 2,
        }
    }

    #[test]
    fn normalization_endpoints() {
        let n = Normalization::MNIST;
        assert!((n.apply(0) + 0.1307 / 0.3081).abs() < 1e-15);
        assert!((n.apply(0) + 0.424212917).abs() < 1e-9);
        assert!((n.apply(255) - 2.821486530).abs() < 1e-9);
    }

    #[test]
    fn subset_relabels_and_counts() {
        let labels = vec![3, 5, 3, 9, 7, 5, 3];
        let split = normalize(&raw(labels.clone()), Normalization::MNIST).unwrap();
        let sub = emnist_subset(&split, 2).unwrap();
        assert_eq!(sub.labels(), &[0, 1, 0, 1, 0]);
        assert_eq!(sub.n_classes(), 2);

        let all = emnist_subset(&split, 4).unwrap();
        assert_eq!(all.len(), split.len());
        let mut oracle = [0usize; 4];
        for l in labels {
            oracle[[3, 5, 7, 9].iter().position(|&c| c == l).unwrap()] += 1;
        }
        assert_eq!(all.class_counts(), oracle.to_vec());

        assert!(matches!(emnist_subset(&split, 1), Err(Error::Parameter(_))));
        assert!(emnist_subset(&split, 5).is_err());
    }

    #[test]
    fn batches_cover_every_index() {
        let sizes: Vec<usize> = epoch_batches(10, 4, &mut Rng::new(0))
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let a = epoch_batches(100, 7, &mut Rng::new(3)).unwrap();
        let b = epoch_batches(100, 7, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(epoch_batches(5, 0, &mut Rng::new(0)).is_err());
    }
}
