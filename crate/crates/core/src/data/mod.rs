//! Datasets, client partitioning, train/test splits and label noise.

mod idx;
mod noise;
mod partition;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use noise::{apply_noise, build_transition, NoiseKind, TransitionMatrix};
pub use partition::{
    partition, partition_dirichlet, partition_pathological, sample_dirichlet, split_indices,
    split_train_test, Partition, PartitionScheme, PartitionSpec,
};
pub use synth::gen_blobs;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Feature matrix plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("dataset must hold at least one example".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape("dataset rows", labels.len(), features.rows()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if features.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in that order. Fails on an empty selection.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!(
                "index {bad} out of range for dataset of {}",
                self.len()
            )));
        }
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// Same features, replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.class_count)
    }

    /// Per-class example counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// One client's disjoint train and test data.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub client_id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}
