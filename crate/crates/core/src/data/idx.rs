use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn header(bytes: &[u8], file: &str, magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < header_len {
        return Err(DataError::TruncatedHeader {
            file: file.into(),
            len: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            file: file.into(),
            expected: magic,
            found,
        });
    }
    let extents: Vec<usize> = (0..dims).map(|d| read_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected: usize = extents.iter().product();
    let found = bytes.len() - header_len;
    if found != expected {
        return Err(DataError::TruncatedPayload {
            file: file.into(),
            expected,
            found,
        });
    }
    Ok(extents)
}

/// Decodes an IDX image/label pair already in memory. Pixels are scaled to
/// [0, 1]; the class count is one more than the largest label.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset, DataError> {
    let dims = header(image_bytes, "images", IDX_IMAGES_MAGIC, 3)?;
    let label_dims = header(label_bytes, "labels", IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if n != label_dims[0] {
        return Err(DataError::CountMismatch {
            images: n,
            labels: label_dims[0],
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Empty("IDX file declares no pixels".into()));
    }
    let pixels = image_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::new(vec![n, 1, rows, cols], pixels).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, class_count, Split::Train)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels).map_err(|e| match e {
        DataError::TruncatedHeader { len, file } => DataError::TruncatedHeader {
            file: path_for(&file, images_path, labels_path),
            len,
        },
        DataError::BadMagic { file, expected, found } => DataError::BadMagic {
            file: path_for(&file, images_path, labels_path),
            expected,
            found,
        },
        DataError::TruncatedPayload { file, expected, found } => DataError::TruncatedPayload {
            file: path_for(&file, images_path, labels_path),
            expected,
            found,
        },
        other => other,
    }
    .into())
}

fn path_for(which: &str, images: &Path, labels: &Path) -> String {
    if which == "images" { images } else { labels }.display().to_string()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel images as an IDX `0x803` file.
pub fn encode_idx_images(data: &Dataset) -> Result<Vec<u8>, DataError> {
    let s = data.images().shape();
    if s[1] != 1 {
        return Err(DataError::Invalid("IDX images must have one channel".into()));
    }
    let mut out = Vec::with_capacity(16 + data.images().len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(data.images().data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_idx_labels(data: &Dataset) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(8 + data.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in data.labels() {
        out.push(u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} exceeds a byte")))?);
    }
    Ok(out)
}
