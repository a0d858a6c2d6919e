//! Model checkpoints.
//!
//! A checkpoint is a single file: one line of JSON (the manifest) terminated
//! by `\n`, followed by the raw parameter payload. The payload is every
//! tensor in declaration order, each value a little-endian IEEE-754 `f64`.
//! The manifest records tensor names and shapes, the format version and the
//! SHA-256 of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ParamRef;

pub const FORMAT_NAME: &str = "caes-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: payload checksum mismatch (expected {expected}, found {found})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: checkpoint version {version} is not supported (max {FORMAT_VERSION})")]
    VersionUnsupported { path: PathBuf, version: u32 },
    #[error("{path}: expected a {expected} checkpoint, found {found}")]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    pub tensors: Vec<TensorSpec>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    /// Model-specific architecture description.
    pub config: serde_json::Value,
}

/// Loaded checkpoint: manifest plus one flat buffer per tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Vec<f64>>,
}

impl Checkpoint {
    /// Look up a tensor by name, checking its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Option<&[f64]> {
        let i = self.manifest.tensors.iter().position(|t| t.name == name)?;
        (self.manifest.tensors[i].shape == shape).then(|| self.tensors[i].as_slice())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize parameters into checkpoint bytes.
pub fn encode(kind: &str, config: serde_json::Value, params: &[ParamRef<'_>]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * params.iter().map(|p| p.data.len()).sum::<usize>());
    for p in params {
        for v in p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        dtype: DTYPE.to_string(),
        tensors: params
            .iter()
            .map(|p| TensorSpec {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        payload_bytes: payload.len(),
        payload_sha256: sha256_hex(&payload),
        config,
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    bytes
}

pub fn write(
    path: impl AsRef<Path>,
    kind: &str,
    config: serde_json::Value,
    params: &[ParamRef<'_>],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode(kind, config, params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn decode(path: &Path, bytes: &[u8], kind: &str) -> Result<Checkpoint, CheckpointError> {
    let malformed = |reason: String| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| malformed("no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| malformed(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(malformed(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version == 0 || manifest.version > FORMAT_VERSION {
        return Err(CheckpointError::VersionUnsupported {
            path: path.to_path_buf(),
            version: manifest.version,
        });
    }
    if manifest.kind != kind {
        return Err(CheckpointError::KindMismatch {
            path: path.to_path_buf(),
            expected: kind.to_string(),
            found: manifest.kind,
        });
    }
    if manifest.dtype != DTYPE {
        return Err(malformed(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let payload = &bytes[split + 1..];
    let found = sha256_hex(payload);
    if found != manifest.payload_sha256 {
        return Err(CheckpointError::ChecksumMismatch {
            path: path.to_path_buf(),
            expected: manifest.payload_sha256,
            found,
        });
    }
    let expected_len: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum::<usize>()
        * 8;
    if payload.len() != expected_len || payload.len() != manifest.payload_bytes {
        return Err(malformed(format!(
            "payload is {} bytes, tensors need {expected_len}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| values.by_ref().take(t.shape.iter().product()).collect())
        .collect();
    Ok(Checkpoint { manifest, tensors })
}

pub fn read(path: impl AsRef<Path>, kind: &str) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(path, &bytes, kind)
}

/// Checksum of a whole checkpoint file, used for run provenance.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, CheckpointError> {
    let path = path.as_ref();
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
}
