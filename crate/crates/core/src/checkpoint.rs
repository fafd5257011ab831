//! Single-file model checkpoints.
//!
//! Layout: magic, format version (u32 LE), header length (u64 LE), JSON
//! header, tensors as little-endian `f32` in declaration order, and a
//! SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelState, TensorInfo};
use crate::privacy::PrivacyLedger;
use crate::schema::Schema;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"DPTABCK\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    schema: Schema,
    ledger: PrivacyLedger,
    tensors: Vec<TensorInfo>,
}

/// Everything needed to sample without the training data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub vocab: Vocab,
    pub schema: Schema,
    pub ledger: PrivacyLedger,
}

pub fn encode(model: &ModelState, vocab: &Vocab, schema: &Schema, ledger: &PrivacyLedger) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        vocab: vocab.clone(),
        schema: schema.clone(),
        ledger: ledger.clone(),
        tensors: model.tensors().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + 4 * model.num_params() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(CheckpointError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let version = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    pos += 4;
    let header_len = u64::from_le_bytes(body[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let json = body.get(pos..pos + header_len).ok_or_else(|| CheckpointError::Format("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
    pos += header_len;
    let raw = &body[pos..];
    if raw.len() % 4 != 0 {
        return Err(CheckpointError::Format("tensor section is not a whole number of f32 values".into()));
    }
    let params: Vec<f64> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let model = ModelState::from_parts(header.config, params)?;
    if model.tensors() != header.tensors.as_slice() {
        return Err(CheckpointError::Format("tensor table does not match the model config".into()));
    }
    Ok(Checkpoint { model, vocab: header.vocab, schema: header.schema, ledger: header.ledger })
}

pub fn save(
    path: impl AsRef<Path>,
    model: &ModelState,
    vocab: &Vocab,
    schema: &Schema,
    ledger: &PrivacyLedger,
) -> Result<(), CheckpointError> {
    fs::write(path, encode(model, vocab, schema, ledger))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
