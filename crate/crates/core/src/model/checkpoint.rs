//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MWDC"
//! 4       4     format version, u32 little-endian
//! 8       4     header length in bytes, u32 little-endian
//! 12      n     UTF-8 JSON header: config, element type, optimizer
//!               metadata, tensor manifest (name, shape, offset, nbytes)
//! 12+n    ...   payload: little-endian IEEE-754 blobs in manifest order,
//!               model parameters first, then Adam first and second moments
//! ```
//!
//! Manifest offsets are relative to the start of the payload; they must be
//! contiguous and cover it exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Mwdcnn;
use crate::config::{ConfigError, ModelConfig};
use crate::layers::ParamSet;
use crate::tensor::{Element, Tensor};
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MWDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {section} needs {expected} bytes, {actual} available")]
    Truncated { section: &'static str, expected: usize, actual: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
    #[error("checkpoint holds {found} elements, {requested} requested")]
    Precision { found: String, requested: &'static str },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::BadMagic(_) => 2,
            CheckpointError::UnsupportedVersion(_) => 3,
            CheckpointError::Truncated { .. } => 4,
            CheckpointError::Header(_) => 5,
            CheckpointError::Manifest(_) => 6,
            CheckpointError::Precision { .. } => 7,
            CheckpointError::Config(_) => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dtype: String,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<ManifestEntry>,
}

fn moment_name(kind: &str, param: &str) -> String {
    format!("adam.{kind}.{param}")
}

pub fn write_checkpoint<T: Element, W: Write>(
    mut out: W,
    model: &Mwdcnn<T>,
    adam: Option<&AdamState<T>>,
) -> Result<(), CheckpointError> {
    let width = (T::BITS / 8) as usize;
    let mut blobs: Vec<(String, &Tensor<T>)> = model.params().iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(a) = adam {
        for (kind, moments) in [("m", &a.m), ("v", &a.v)] {
            for ((name, _), t) in model.params().iter().zip(moments) {
                blobs.push((moment_name(kind, name), t));
            }
        }
    }
    let mut offset = 0;
    let tensors = blobs
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset, nbytes: t.numel() * width };
            offset += e.nbytes;
            e
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config().clone(),
        dtype: T::NAME.to_string(),
        optimizer: adam.map(|a| OptimizerMeta { step: a.t, beta1: a.beta1, beta2: a.beta2, eps: a.eps }),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| CheckpointError::Header("header exceeds 4 GiB".into()))?;

    let mut buf = Vec::with_capacity(12 + json.len() + offset);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &blobs {
        for &v in t.data() {
            v.to_le_bytes_into(&mut buf);
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint<T: Element>(
    path: impl AsRef<Path>,
    model: &Mwdcnn<T>,
    adam: Option<&AdamState<T>>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    {
        let f = fs::File::create(&tmp)?;
        write_checkpoint(io::BufWriter::new(f), model, adam)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { section: "magic", expected: 4, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated { section: "preamble", expected: 12, actual: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated { section: "header", expected: header_len, actual: rest.len() });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &rest[header_len..]))
}

fn validate_manifest(header: &CheckpointHeader, width: usize, payload_len: usize) -> Result<(), CheckpointError> {
    let mut expected_offset = 0;
    for e in &header.tensors {
        if e.offset != expected_offset {
            return Err(CheckpointError::Manifest(format!(
                "{} starts at byte {} but the previous blob ends at {expected_offset}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if numel * width != e.nbytes {
            return Err(CheckpointError::Manifest(format!(
                "{} has shape {:?} but {} bytes",
                e.name, e.shape, e.nbytes
            )));
        }
        expected_offset += e.nbytes;
    }
    if payload_len < expected_offset {
        return Err(CheckpointError::Truncated { section: "payload", expected: expected_offset, actual: payload_len });
    }
    if payload_len > expected_offset {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing payload bytes not covered by the manifest",
            payload_len - expected_offset
        )));
    }
    Ok(())
}

fn decode<T: Element>(e: &ManifestEntry, payload: &[u8], width: usize) -> Tensor<T> {
    let data = payload[e.offset..e.offset + e.nbytes].chunks_exact(width).map(T::from_le_slice).collect();
    Tensor::new(e.shape.clone(), data).expect("validated manifest")
}

pub fn read_checkpoint<T: Element, R: Read>(
    mut input: R,
) -> Result<(Mwdcnn<T>, Option<AdamState<T>>), CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let (header, payload) = split_header(&bytes)?;
    if header.dtype != T::NAME {
        return Err(CheckpointError::Precision { found: header.dtype, requested: T::NAME });
    }
    let width = (T::BITS / 8) as usize;
    validate_manifest(&header, width, payload.len())?;

    let template = Mwdcnn::<T>::new(header.config.clone())?;
    let n_params = template.params().len();
    let expected_blobs = if header.optimizer.is_some() { 3 * n_params } else { n_params };
    if header.tensors.len() != expected_blobs {
        return Err(CheckpointError::Manifest(format!(
            "expected {expected_blobs} tensors for this config, manifest lists {}",
            header.tensors.len()
        )));
    }
    let check = |e: &ManifestEntry, name: &str, shape: &[usize]| {
        if e.name != name || e.shape != shape {
            return Err(CheckpointError::Manifest(format!(
                "entry {} {:?} does not match model tensor {name} {shape:?}",
                e.name, e.shape
            )));
        }
        Ok(())
    };

    let mut params = ParamSet::default();
    for (e, (name, t)) in header.tensors.iter().zip(template.params().iter()) {
        check(e, name, t.shape())?;
        params.push(name, decode(e, payload, width));
    }
    let adam = match &header.optimizer {
        None => None,
        Some(meta) => {
            let mut moments = [Vec::new(), Vec::new()];
            for (k, kind) in ["m", "v"].iter().enumerate() {
                let entries = &header.tensors[(k + 1) * n_params..(k + 2) * n_params];
                for (e, (name, t)) in entries.iter().zip(template.params().iter()) {
                    check(e, &moment_name(kind, name), t.shape())?;
                    moments[k].push(decode(e, payload, width));
                }
            }
            let [m, v] = moments;
            Some(AdamState { m, v, t: meta.step, beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps })
        }
    };
    let model = Mwdcnn::from_parts(header.config, params)?;
    Ok((model, adam))
}

pub fn load_checkpoint<T: Element>(
    path: impl AsRef<Path>,
) -> Result<(Mwdcnn<T>, Option<AdamState<T>>), CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}

/// Reads only the preamble and header, e.g. to pick the element type.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = fs::read(path)?;
    Ok(split_header(&bytes)?.0)
}
