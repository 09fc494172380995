use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy_with_grad;
use crate::nn::Model;

/// Rows per forward pass during evaluation and scoring.
pub(crate) const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1_accuracy: f64,
    pub mean_loss: f64,
    pub count: usize,
}

/// Top-1 accuracy and mean cross-entropy of `model` on the given samples,
/// without augmentation.
pub fn evaluate_indices(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on zero samples".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.gather(chunk)?;
        let logits = model.forward(&x)?;
        let (loss, _) = cross_entropy_with_grad(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(Evaluation {
        top1_accuracy: correct as f64 / indices.len() as f64,
        mean_loss: loss_sum / indices.len() as f64,
        count: indices.len(),
    })
}

/// Median of a non-empty list; the mean of the two middle values when the
/// length is even.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}
