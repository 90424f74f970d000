//! Labelled image collections and their sources.

mod cifar;
mod synth;

pub use cifar::{load_cifar10, parse_cifar10, CIFAR10_RECORD_BYTES, CIFAR10_RECORD_ID_STRIDE};
pub use synth::synth_dataset;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[n, c, h, w]` with values in `[0, 1]`, class labels and unique
/// per-sample ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Validation(format!(
                "dataset images must be [n, c, h, w], got {shape:?}"
            )));
        }
        let n = shape[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Validation(format!(
                "{n} images but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "sample {i} has label {l}, expected < {num_classes}"
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Validation(format!("duplicate sample id {dup}")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            ids,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape().iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Stacks the selected samples into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "sample",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(f64::from(v))));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }

    /// The selected samples as a new dataset, ids preserved.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch::<f32>(indices)?;
        let ids = indices.iter().map(|&i| self.ids[i]).collect();
        Self::new(images, labels, ids, self.num_classes, self.split)
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
