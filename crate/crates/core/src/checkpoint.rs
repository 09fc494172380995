//! Flat little-endian checkpoint container.
//!
//! ```text
//! offset  bytes       field
//! 0       4           magic "SLKD"
//! 4       2           format version, u16 (currently 1)
//! 6       1           role tag: 0 teacher, 1 student, 2 snapshot, 3 dataset
//! 7       4           descriptor length D, u32
//! 11      D           descriptor, UTF-8 JSON (model spec or dataset header)
//! ..      4           metadata length M, u32
//! ..      M           metadata, UTF-8 JSON object of strings, keys sorted
//! ..      1           optimizer kind: 0 none, 1 sgd, 2 adam
//! ..      8           optimizer step count, u64
//! ..      4           tensor count T, u32
//! T times:
//!         2           name length N, u16
//!         N           name, UTF-8
//!         1           rank R (1..=4)
//!         4*R         extents, u32 each
//!         4*prod      values, f32 each
//! end-4   4           CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Model parameters are stored
//! as `layer{i}.weight` / `layer{i}.bias`; optimizer state as
//! `opt.velocity.{k}` (SGD) or `opt.m.{k}` / `opt.v.{k}` (Adam), where `k`
//! counts parameter tensors in layer order.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Model, ModelSpec, OptimizerState, Role, SgdState};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"SLKD";
pub const FORMAT_VERSION: u16 = 1;
const DATASET_TAG: u8 = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not an SLKD checkpoint")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Content-derived identifier: the first 16 hex digits of the SHA-256 of
/// the file bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub type Meta = BTreeMap<String, String>;

/// Decoded container before interpretation as a model or dataset.
#[derive(Debug, Clone, PartialEq)]
struct Container {
    role_tag: u8,
    descriptor: String,
    meta: Meta,
    opt_kind: u8,
    opt_step: u64,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.role_tag);
        put_str(&mut out, &self.descriptor);
        put_str(&mut out, &serde_json::to_string(&self.meta).expect("string map serializes"));
        out.push(self.opt_kind);
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let short = |what: &str| CheckpointError::ShapeInconsistency(format!("file ends inside {what}"));
        if bytes.len() < 4 {
            return Err(short("magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < 6 {
            return Err(short("version"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if bytes.len() < 10 {
            return Err(short("header"));
        }
        let body = &bytes[..bytes.len() - 4];
        let mut r = Reader { buf: body, pos: 6 };
        let role_tag = r.u8("role tag")?;
        let descriptor = r.string_u32("descriptor")?;
        let meta_text = r.string_u32("metadata")?;
        let opt_kind = r.u8("optimizer kind")?;
        let opt_step = u64::from_le_bytes(r.take(8, "optimizer step")?.try_into().unwrap());
        let count = r.u32("tensor count")? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "tensor name length")?.try_into().unwrap()) as usize;
            let name = r.take(name_len, "tensor name")?.to_vec();
            let rank = r.u8("tensor rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::ShapeInconsistency(format!("tensor {i} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::ShapeInconsistency(format!("tensor {i} is too large")))?;
            let data = r.take(numel.saturating_mul(4), "tensor data")?;
            raw.push((name, shape, data));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::ShapeInconsistency(format!(
                "{} unaccounted bytes after the declared tensors",
                body.len() - r.pos
            )));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let tensors = raw
            .into_iter()
            .map(|(name, shape, data)| {
                let name = String::from_utf8(name)
                    .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
                let values = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(shape, values)
                    .map_err(|e| CheckpointError::ShapeInconsistency(format!("tensor {name}: {e}")))?;
                Ok((name, t))
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(Container {
            role_tag,
            descriptor,
            meta,
            opt_kind,
            opt_step,
            tensors,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::ShapeInconsistency(format!(
                "{what} needs {n} bytes but only {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string_u32(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

/// A model restored from disk with its optimizer state and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub meta: Meta,
    pub id: String,
}

pub fn encode_model(model: &Model, optimizer: Option<&OptimizerState>, meta: &Meta) -> Vec<u8> {
    let mut tensors = Vec::new();
    for (i, group) in model.params().iter().enumerate() {
        for (t, suffix) in group.iter().zip(["weight", "bias"]) {
            tensors.push((format!("layer{i}.{suffix}"), t.clone()));
        }
    }
    let (opt_kind, opt_step) = match optimizer {
        None => (0, 0),
        Some(OptimizerState::Sgd(s)) => {
            for (k, t) in s.velocity.iter().enumerate() {
                tensors.push((format!("opt.velocity.{k}"), t.clone()));
            }
            (1, 0)
        }
        Some(OptimizerState::Adam(s)) => {
            for (k, t) in s.m.iter().enumerate() {
                tensors.push((format!("opt.m.{k}"), t.clone()));
            }
            for (k, t) in s.v.iter().enumerate() {
                tensors.push((format!("opt.v.{k}"), t.clone()));
            }
            (2, s.step)
        }
    };
    Container {
        role_tag: model.role().tag(),
        descriptor: serde_json::to_string(model.spec()).expect("model spec serializes"),
        meta: meta.clone(),
        opt_kind,
        opt_step,
        tensors,
    }
    .encode()
}

fn take(map: &mut BTreeMap<String, Tensor>, name: String) -> Result<Tensor, CheckpointError> {
    map.remove(&name)
        .ok_or_else(|| CheckpointError::ShapeInconsistency(format!("missing tensor {name}")))
}

/// `prefix.0 .. prefix.{n-1}`, or nothing when the group was never allocated.
fn take_group(map: &mut BTreeMap<String, Tensor>, prefix: &str, n: usize) -> Result<Vec<Tensor>, CheckpointError> {
    if !map.contains_key(&format!("{prefix}.0")) {
        return Ok(Vec::new());
    }
    (0..n).map(|k| take(map, format!("{prefix}.{k}"))).collect()
}

pub fn decode_model(bytes: &[u8]) -> Result<Checkpoint> {
    let c = Container::decode(bytes)?;
    let role = Role::from_tag(c.role_tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("role tag {} is not a model role", c.role_tag)))?;
    let spec: ModelSpec = serde_json::from_str(&c.descriptor)
        .map_err(|e| CheckpointError::Malformed(format!("model descriptor: {e}")))?;
    let mut by_name: BTreeMap<String, Tensor> = c.tensors.into_iter().collect();
    let mut params = Vec::with_capacity(spec.layers.len());
    let mut n_param_tensors = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.kind.param_count() == 0 {
            params.push(Vec::new());
        } else {
            params.push(vec![
                take(&mut by_name, format!("layer{i}.weight"))?,
                take(&mut by_name, format!("layer{i}.bias"))?,
            ]);
            n_param_tensors += 2;
        }
    }
    let mut group = |prefix: &str| take_group(&mut by_name, prefix, n_param_tensors);
    let optimizer = match c.opt_kind {
        0 => None,
        1 => Some(OptimizerState::Sgd(SgdState {
            velocity: group("opt.velocity")?,
        })),
        2 => Some(OptimizerState::Adam(AdamState {
            step: c.opt_step,
            m: group("opt.m")?,
            v: group("opt.v")?,
        })),
        k => return Err(CheckpointError::Malformed(format!("unknown optimizer kind {k}")).into()),
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(CheckpointError::ShapeInconsistency(format!("unexpected tensor {extra}")).into());
    }
    let model = Model::from_params(spec, role, params)
        .map_err(|e| CheckpointError::ShapeInconsistency(e.to_string()))?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta: c.meta,
        id: checkpoint_id(bytes),
    })
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves a model checkpoint and returns its id.
pub fn save(model: &Model, optimizer: Option<&OptimizerState>, meta: &Meta, path: &Path) -> Result<String> {
    if model.params().iter().flatten().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("refusing to save non-finite parameters".into()));
    }
    let bytes = encode_model(model, optimizer, meta);
    write_atomic(path, &bytes)?;
    Ok(checkpoint_id(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetHeader {
    class_count: usize,
    split: Split,
}

/// Serialises a dataset into the checkpoint container (role tag 3), with
/// labels stored as an `f32` tensor.
pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let labels = Tensor::from_parts(vec![data.len()], data.labels().iter().map(|&l| l as f32).collect());
    Container {
        role_tag: DATASET_TAG,
        descriptor: serde_json::to_string(&DatasetHeader {
            class_count: data.class_count(),
            split: data.split(),
        })
        .expect("header serializes"),
        meta: Meta::new(),
        opt_kind: 0,
        opt_step: 0,
        tensors: vec![("images".into(), data.images().clone()), ("labels".into(), labels)],
    }
    .encode()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let c = Container::decode(bytes)?;
    if c.role_tag != DATASET_TAG {
        return Err(CheckpointError::Malformed("container does not hold a dataset".into()).into());
    }
    let header: DatasetHeader = serde_json::from_str(&c.descriptor)
        .map_err(|e| CheckpointError::Malformed(format!("dataset descriptor: {e}")))?;
    let mut images = None;
    let mut labels = None;
    for (name, t) in c.tensors {
        match name.as_str() {
            "images" => images = Some(t),
            "labels" => labels = Some(t.data().iter().map(|&v| v as usize).collect::<Vec<_>>()),
            _ => return Err(CheckpointError::ShapeInconsistency(format!("unexpected tensor {name}")).into()),
        }
    }
    let (Some(images), Some(labels)) = (images, labels) else {
        return Err(CheckpointError::ShapeInconsistency("dataset needs images and labels".into()).into());
    };
    Ok(Dataset::new(images, labels, header.class_count, header.split)?)
}
