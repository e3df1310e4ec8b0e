//! In-memory labelled datasets.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;

/// Feature rows with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    /// Number of classes; 0 for unlabelled data.
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(format!("{} labels for {} rows", l.len(), features.rows())));
            }
            if let Some((i, y)) = l.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::shape(format!("label {y} at row {i} outside [0, {num_classes})")));
            }
        } else if num_classes != 0 {
            return Err(Error::shape("num_classes > 0 requires labels"));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a network batch (labels included when present).
    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.features.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Subset of rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let b = self.batch(idx);
        Dataset { features: b.inputs, labels: b.labels, num_classes: self.num_classes }
    }

    pub fn all(&self) -> Batch {
        Batch { inputs: self.features.clone(), labels: self.labels.clone() }
    }
}
