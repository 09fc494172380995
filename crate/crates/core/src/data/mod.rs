//! Datasets: IDX and CIFAR-10 binary loaders, a seeded Gaussian-blob
//! generator, augmentation and epoch batching.

mod augment;
mod batch;
mod cifar;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use augment::{augment, AugmentPolicy, HFlip, ImageDraw, PadCrop};
pub use batch::{make_batches, BatchPlan};
pub use cifar::{encode_cifar, load_cifar_binary, parse_cifar, CIFAR_RECORD_LEN};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_blobs_split, with_label_noise, BlobSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: truncated header ({len} bytes)")]
    TruncatedHeader { file: String, len: usize },
    #[error("{file}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { file: String, expected: u32, found: u32 },
    #[error("{file}: truncated payload, header declares {expected} bytes but {found} follow")]
    TruncatedPayload { file: String, expected: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: length {len} is not a multiple of the {record}-byte record size")]
    RecordLength { file: String, len: usize, record: usize },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("label {label} at index {index} is outside [0, {class_count})")]
    LabelRange { index: usize, label: usize, class_count: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images with shape `(n, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    class_counts: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be (n, c, h, w), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if class_count == 0 {
            return Err(DataError::Invalid("class_count must be positive".into()));
        }
        let mut class_counts = vec![0; class_count];
        for (index, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(DataError::LabelRange {
                    index,
                    label,
                    class_count,
                });
            }
            class_counts[label] += 1;
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            class_counts,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `(c, h, w)`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels for the given indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> crate::Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Training and test sets drawn from the same source.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}
