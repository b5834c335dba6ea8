//! Task-boundary checkpoints.
//!
//! Layout: 8-byte magic, format-version byte, body length (u64 LE), body,
//! SHA-256 of the body. The body holds the run record (JSON, which includes
//! the effective config), the number of completed tasks, the serialized
//! model, the prompt matrix and the selector (JSON).

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::record::{write_atomic, RunRecord};
use super::run::RunState;
use crate::dmp::MetaPrompt;
use crate::drs::RankSelector;
use crate::flora::{read_str, read_u64, write_str};
use crate::model::{ModelError, TinyTransformer};
use crate::numerics::{Matrix, NumericsError};

pub const MAGIC: &[u8; 8] = b"FMLORACK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("checkpoint body is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for CheckpointError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Truncated => Self::Truncated,
            other => Self::Malformed(other.to_string()),
        }
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        Self::Malformed(e.to_string())
    }
}

pub fn encode(state: &RunState) -> Vec<u8> {
    let mut body = Vec::new();
    write_str(&mut body, &serde_json::to_string(&state.record).expect("record serializes")).unwrap();
    body.extend_from_slice(&(state.tasks_completed as u64).to_le_bytes());
    state.model.write_to(&mut body).unwrap();
    state.prompt.tokens().write_to(&mut body).unwrap();
    write_str(&mut body, &serde_json::to_string(&state.selector).expect("selector serializes")).unwrap();

    let mut out = Vec::with_capacity(body.len() + 49);
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    out
}

pub fn decode(bytes: &[u8]) -> Result<RunState, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = *bytes.get(8).ok_or(CheckpointError::Truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len_bytes: [u8; 8] = bytes.get(9..17).ok_or(CheckpointError::Truncated)?.try_into().unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let end = 17usize.checked_add(len).ok_or(CheckpointError::Truncated)?;
    let body = bytes.get(17..end).ok_or(CheckpointError::Truncated)?;
    let digest = bytes.get(end..end + 32).ok_or(CheckpointError::Truncated)?;
    if bytes.len() != end + 32 {
        return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let r = &mut &body[..];
    let record: RunRecord =
        serde_json::from_str(&read_str(r)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let tasks_completed = read_u64(r)? as usize;
    let model = TinyTransformer::read_from(r)?;
    let prompt = MetaPrompt::from_tokens(Matrix::read_from(r)?);
    let selector: RankSelector =
        serde_json::from_str(&read_str(r)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Malformed("unexpected bytes at end of body".into()));
    }
    Ok(RunState {
        config: record.config.clone(),
        model,
        prompt,
        selector,
        record,
        tasks_completed,
    })
}

pub fn save_checkpoint(state: &RunState, path: &Path) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode(state))?)
}

pub fn load_checkpoint(path: &Path) -> Result<RunState, CheckpointError> {
    decode(&std::fs::read(path)?)
}
