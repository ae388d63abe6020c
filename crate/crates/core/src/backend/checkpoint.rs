//! Single-file checkpoint format.
//!
//! ```text
//! "TDS1" | u32 LE metadata length | metadata (JSON) | parameter block | SHA-256 of all preceding bytes
//! ```
//!
//! The metadata carries the parameter block's length and digest and the
//! trailer covers the whole file, so a truncated or bit-flipped file is
//! rejected instead of loading altered weights or labels.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDS1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backend_kind: String,
    pub version: u32,
    pub label_order: Vec<String>,
    pub positive_label: String,
    pub config: BackendConfig,
    pub training_fingerprint: String,
    pub parameters: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    backend_kind: String,
    version: u32,
    label_order: Vec<String>,
    positive_label: String,
    config: BackendConfig,
    training_fingerprint: String,
    parameters_len: u64,
    parameters_sha256: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let metadata = Metadata {
            backend_kind: self.backend_kind.clone(),
            version: self.version,
            label_order: self.label_order.clone(),
            positive_label: self.positive_label.clone(),
            config: self.config.clone(),
            training_fingerprint: self.training_fingerprint.clone(),
            parameters_len: self.parameters.len() as u64,
            parameters_sha256: hex::encode(Sha256::digest(&self.parameters)),
        };
        let meta = serde_json::to_vec(&metadata).expect("metadata serializes");
        let mut out = Vec::with_capacity(8 + meta.len() + self.parameters.len() + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.parameters);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::IncompatibleCheckpoint(msg.to_string());
        if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing TDS1 magic header"));
        }
        let (bytes, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(bytes).as_slice() != trailer {
            return Err(bad("file checksum mismatch"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let meta_end = 8usize
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("metadata block truncated"))?;
        let metadata: Metadata = serde_json::from_slice(&bytes[8..meta_end])
            .map_err(|e| Error::IncompatibleCheckpoint(format!("unreadable metadata: {e}")))?;
        if metadata.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unsupported checkpoint version {}",
                metadata.version
            )));
        }
        let parameters = &bytes[meta_end..];
        if parameters.len() as u64 != metadata.parameters_len {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter block is {} bytes, expected {}",
                parameters.len(),
                metadata.parameters_len
            )));
        }
        if hex::encode(Sha256::digest(parameters)) != metadata.parameters_sha256 {
            return Err(bad("parameter block checksum mismatch"));
        }
        if !metadata.label_order.contains(&metadata.positive_label) {
            return Err(bad("positive label missing from label order"));
        }
        Ok(Self {
            backend_kind: metadata.backend_kind,
            version: metadata.version,
            label_order: metadata.label_order,
            positive_label: metadata.positive_label,
            config: metadata.config,
            training_fingerprint: metadata.training_fingerprint,
            parameters: parameters.to_vec(),
        })
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tds.tmp");
    std::fs::write(&tmp, checkpoint.encode()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::IncompatibleCheckpoint(format!("{}: no such checkpoint", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    Checkpoint::decode(&bytes)
}
