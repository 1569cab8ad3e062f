//! Checkpoint file format.
//!
//! ```text
//! "MEDK" | u32 LE version (1) | u32 LE header length | JSON header | f32 LE data
//! ```
//!
//! The header lists every stored tensor (parameters, then optimizer moments)
//! with its shape; raw data follows in exactly that order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::AdamState;
use crate::model::{Med, MedConfig, MedParams, ModelError};
use crate::scenegen::Vocabulary;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEDK";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume training or serve inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Med,
    /// Optimizer moments of the run that produced this checkpoint.
    pub optimizer: AdamState,
    /// Optimizer steps taken so far, across stages.
    pub step: u64,
    /// Fingerprint of the corpus the model was trained on.
    pub corpus_fingerprint: String,
    pub vocab: Vocabulary,
    /// Whether the statement head has been fine-tuned.
    pub statement_head_trained: bool,
}

impl Checkpoint {
    pub fn new(model: Med, vocab: Vocabulary) -> Self {
        Self {
            model,
            optimizer: AdamState::default(),
            step: 0,
            corpus_fingerprint: String::new(),
            vocab,
            statement_head_trained: false,
        }
    }

    pub fn config(&self) -> &MedConfig {
        &self.model.config
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MedConfig,
    step: u64,
    optimizer_step: u64,
    corpus_fingerprint: String,
    vocab: Vec<String>,
    statement_head_trained: bool,
    tensors: Vec<TensorEntry>,
}

fn stored_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = ckpt.model.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    out.extend(ckpt.optimizer.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)));
    out.extend(ckpt.optimizer.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)));
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let tensors = stored_tensors(ckpt);
    let header = Header {
        config: ckpt.model.config.clone(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.step,
        corpus_fingerprint: ckpt.corpus_fingerprint.clone(),
        vocab: ckpt.vocab.words().map(str::to_string).collect(),
        statement_head_trained: ckpt.statement_head_trained,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let data_len: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(12 + json.len() + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).ok_or(CheckpointError::TruncatedFile)?;
    let out = bytes.get(*pos..end).ok_or(CheckpointError::TruncatedFile)?;
    *pos = end;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let b = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
        return Err(CheckpointError::TruncatedFile);
    }
    let magic = take(bytes, &mut pos, 4).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = read_u32(bytes, &mut pos)? as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, header_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let malformed = |e: ModelError| CheckpointError::Malformed(e.to_string());

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for entry in header.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {} is too large", entry.name)))?;
        let raw = take(bytes, &mut pos, n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if let Some(name) = entry.name.strip_prefix(MOMENT_M) {
            m.insert(name.to_string(), t);
        } else if let Some(name) = entry.name.strip_prefix(MOMENT_V) {
            v.insert(name.to_string(), t);
        } else {
            params.insert(entry.name, t);
        }
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - pos
        )));
    }
    let vocab = Vocabulary::from_words(header.vocab).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if vocab.len() != header.config.vocab_size {
        return Err(CheckpointError::Malformed(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }
    let params = MedParams::from_tensors(&header.config, params).map_err(malformed)?;
    let model = Med::from_parts(header.config, params).map_err(malformed)?;
    Ok(Checkpoint {
        model,
        optimizer: AdamState {
            step: header.optimizer_step,
            m,
            v,
        },
        step: header.step,
        corpus_fingerprint: header.corpus_fingerprint,
        vocab,
        statement_head_trained: header.statement_head_trained,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
