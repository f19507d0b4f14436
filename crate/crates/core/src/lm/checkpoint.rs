use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Transformer};
use super::tokenizer::Tokenizer;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::id_registry::IdRegistry;
use crate::util;

pub const CHECKPOINT_MAGIC: &[u8] = b"T2TCKPT1\n";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tokenizer: Tokenizer,
    pub model: Transformer<f32>,
    pub train: TrainConfig,
    pub registry_fingerprint: String,
    /// Mean token cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    registry_fingerprint: String,
    loss_trace: Vec<f64>,
    vocab_size: usize,
    tensors: Vec<(String, usize, usize)>,
    tokenizer: Tokenizer,
}

impl Checkpoint {
    pub fn check_registry(&self, registry: &IdRegistry) -> Result<()> {
        if self.registry_fingerprint != registry.fingerprint() {
            return Err(Error::FingerprintMismatch {
                checkpoint: self.registry_fingerprint.clone(),
                registry: registry.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// Magic line, one JSON header line, then little-endian f32 parameters.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            train: self.train.clone(),
            registry_fingerprint: self.registry_fingerprint.clone(),
            loss_trace: self.loss_trace.clone(),
            vocab_size: self.model.vocab_size(),
            tensors: self.model.layout().tensors().iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect(),
            tokenizer: self.tokenizer.clone(),
        };
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header)?);
        out.push(b'\n');
        for p in self.model.params() {
            out.extend(p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Format("not a checkpoint (bad magic)".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header not terminated".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        let blob = &rest[nl + 1..];
        if blob.len() % 4 != 0 {
            return Err(Error::Format("parameter blob is not a whole number of f32".into()));
        }
        let params: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if header.vocab_size != header.tokenizer.vocab_size() {
            return Err(Error::DimensionMismatch {
                expected: header.tokenizer.vocab_size(),
                got: header.vocab_size,
            });
        }
        let model = Transformer::from_params(header.model, header.vocab_size, params)?;
        let shapes: Vec<(String, usize, usize)> =
            model.layout().tensors().iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
        if shapes != header.tensors {
            return Err(Error::Format("tensor table does not match the model configuration".into()));
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Checkpoint {
            tokenizer: header.tokenizer,
            model,
            train: header.train,
            registry_fingerprint: header.registry_fingerprint,
            loss_trace: header.loss_trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(util::write_atomic(path, &self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
