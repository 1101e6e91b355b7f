//! Datasets: IDX (MNIST-family) files, seeded synthetic Gaussian blobs, and
//! batch sampling.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;
use crate::rng::{self, Rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Noise level of [`synthetic_blobs`].
pub const BLOB_SIGMA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Self {
        assert_eq!(features.rows(), labels.len(), "label count must equal sample count");
        assert!(labels.iter().all(|&l| l < num_classes), "label out of range");
        Self {
            features,
            labels,
            num_classes,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn range_batch(&self, start: usize, end: usize) -> Batch {
        Batch::new(self.features.slice_rows(start, end), self.labels[start..end].to_vec())
    }

    pub fn all(&self) -> Batch {
        self.range_batch(0, self.len())
    }

    /// First `len - n_valid` samples for training, the rest for validation.
    pub fn split_off(self, n_valid: usize) -> (Dataset, Dataset) {
        let n_train = self.len().saturating_sub(n_valid);
        let train = Dataset::new(
            self.features.slice_rows(0, n_train),
            self.labels[..n_train].to_vec(),
            self.num_classes,
            Split::Train,
        );
        let valid = Dataset::new(
            self.features.slice_rows(n_train, self.len()),
            self.labels[n_train..].to_vec(),
            self.num_classes,
            Split::Valid,
        );
        (train, valid)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "header truncated"))
}

/// Parses an IDX image file body into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "images.count")? as usize;
    let rows = be_u32(bytes, 8, "images.rows")? as usize;
    let cols = be_u32(bytes, 12, "images.cols")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(
            "images.payload",
            format!("expected {need} bytes, found {}", payload.len()),
        ));
    }
    Ok((count, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "labels.count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            "labels.payload",
            format!("expected {count} bytes, found {}", payload.len()),
        ));
    }
    Ok(payload)
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != count {
        return Err(Error::format(
            "labels.count",
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset::new(
        Matrix::from_vec(count, rows * cols, features),
        labels,
        num_classes,
        split,
    ))
}

/// Gaussian class blobs with noise [`BLOB_SIGMA`]; see
/// [`synthetic_blobs_with_sigma`].
pub fn synthetic_blobs(seed: u64, n_samples: usize, n_classes: usize, dim: usize) -> Dataset {
    synthetic_blobs_with_sigma(seed, n_samples, n_classes, dim, BLOB_SIGMA)
}

/// Class means sit on the unit sphere centred at `0.5·1`; samples add
/// isotropic noise and are clamped to `[0, 1]`. Labels cycle through the
/// classes in a seeded random order.
pub fn synthetic_blobs_with_sigma(
    seed: u64,
    n_samples: usize,
    n_classes: usize,
    dim: usize,
    sigma: f64,
) -> Dataset {
    assert!(n_classes >= 2, "need at least two classes");
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| 0.5 + x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let c = rng.random_range(0..n_classes);
        for &mu in &means[c] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            features.push((mu + sigma * eps).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(
        Matrix::from_vec(n_samples, dim, features),
        labels,
        n_classes,
        Split::Train,
    )
}

/// Uniform draw of `size` distinct samples.
pub fn sample_batch(data: &Dataset, size: usize, rng: &mut Rng) -> Result<Batch> {
    if size == 0 || size > data.len() {
        return Err(Error::BatchSize {
            size,
            available: data.len(),
        });
    }
    let idx = index::sample(rng, data.len(), size).into_vec();
    Ok(data.batch(&idx))
}
