//! Datasets, batching, normalisation and checkpoints.

mod checkpoint;
mod loaders;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, RawTensor, WireDType, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loaders::{load_cifar10, load_image_folder, load_mnist_idx, synthetic_blobs, CIFAR_RECORD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images `N, C, H, W`; pixel values in `[0, 1]` until normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "Dataset",
                format!("images must be N,C,H,W, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample extents `C, H, W`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Dataset::new(
            self.images.slice_outer(0, n)?,
            self.labels[..n].to_vec(),
            self.classes,
            self.split,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Sample order for one epoch: a permutation drawn from the epoch's shuffle
/// stream, cut into batches of `q` with a final short batch.
pub fn batch_indices(n: usize, q: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if q == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::shuffle_stream(seed, epoch));
    Ok(order.chunks(q).map(<[usize]>::to_vec).collect())
}

/// Shuffled batches of one epoch.
pub fn batches<'d, T: Real>(
    ds: &'d Dataset<T>,
    q: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'd> {
    let idx = batch_indices(ds.len(), q, seed, epoch)?;
    Ok(idx.into_iter().map(move |b| ds.select(&b)))
}

/// Batches in dataset order.
pub fn sequential_batches<'d, T: Real>(
    ds: &'d Dataset<T>,
    q: usize,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'd> {
    if q == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let n = ds.len();
    Ok((0..n).step_by(q).map(move |start| {
        let len = q.min(n - start);
        Ok(Batch {
            images: ds.images.slice_outer(start, len)?,
            labels: ds.labels[start..start + len].to_vec(),
        })
    }))
}

/// Per-channel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation per channel; a constant
    /// channel gets unit scale.
    pub fn fit<T: Real>(ds: &Dataset<T>) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let [c, h, w] = ds.sample_shape();
        let plane = h * w;
        let data = ds.images.data();
        let count = (ds.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for n in 0..ds.len() {
            for ch in 0..c {
                let s = &data[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                mean[ch] += s.iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..ds.len() {
            for ch in 0..c {
                let s = &data[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                sq[ch] += s.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|&s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply<T: Real>(&self, ds: &Dataset<T>) -> Result<Dataset<T>> {
        let [c, h, w] = ds.sample_shape();
        if c != self.mean.len() {
            return Err(Error::ChannelMismatch(format!(
                "normalisation for {} channels applied to {c}",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let scale: Vec<T> = self.std.iter().map(|&s| T::c(1.0 / s)).collect();
        let shift: Vec<T> = self.mean.iter().map(|&m| T::c(m)).collect();
        let mut images = ds.images.clone();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - shift[ch]) * scale[ch];
        }
        Dataset::new(images, ds.labels.clone(), ds.classes, ds.split)
    }
}
