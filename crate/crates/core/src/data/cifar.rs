use std::path::PathBuf;

use super::{DataError, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Decodes concatenated CIFAR-10 binary files, preserving record order.
pub fn parse_cifar(files: &[(String, Vec<u8>)]) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (name, bytes) in files {
        if bytes.is_empty() {
            return Err(DataError::Empty(format!("{name} has no records")));
        }
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::RecordLength {
                file: name.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty("no CIFAR files given".into()));
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, CIFAR_CLASSES, Split::Train)
}

pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let files = paths
        .iter()
        .map(|p| {
            std::fs::read(p)
                .map(|b| (p.display().to_string(), b))
                .map_err(|e| Error::io(p, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parse_cifar(&files)?)
}

/// Encodes a `3x32x32` dataset as CIFAR-10 binary records.
pub fn encode_cifar(data: &Dataset) -> Result<Vec<u8>, DataError> {
    if data.sample_shape() != [3, 32, 32] {
        return Err(DataError::Invalid(format!(
            "CIFAR records are 3x32x32, got {:?}",
            data.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_LEN);
    for (i, &label) in data.labels().iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| DataError::Invalid(format!("label {label} exceeds a byte")))?);
        out.extend(
            data.images()
                .row(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}
