//! Self-describing checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "LENLABCK"
//! 8       4     u32 format version (1)
//! 12      8     u64 header length H
//! 20      H     UTF-8 JSON header
//! 20+H    ...   f32 data: every tensor of the parameters, then of Adam's
//!               first moments, then of its second moments, each section in
//!               the tensor order listed by the header
//! ```
//!
//! The header holds `config`, `vocab` (token list, index = id), `step`,
//! `best_epoch`, `metric_log`, and `tensors` (`name` and `shape` of every
//! parameter tensor, in storage order).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use super::params::ModelParams;
use super::train::EpochRecord;
use super::transformer::Model;
use super::vocab::{Vocab, PAD};
use super::{ModelConfig, ModelError, Result};

pub const MAGIC: &[u8; 8] = b"LENLABCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub metric_log: Vec<EpochRecord>,
    /// Epoch whose parameters these are (0 = before any training in this run).
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    best_epoch: usize,
    metric_log: Vec<EpochRecord>,
    tensors: Vec<TensorInfo>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn fresh(model: &Model<f32>, vocab: Vocab) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab,
            params: model.params.clone(),
            adam: AdamState::new(&model.params),
            metric_log: Vec::new(),
            best_epoch: 0,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.adam.step,
            best_epoch: self.best_epoch,
            metric_log: self.metric_log.clone(),
            tensors: self.params.named().into_iter().map(|(name, t)| TensorInfo { name, shape: t.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 12 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for section in [&self.params, &self.adam.m, &self.adam.v] {
            for (_, t) in section.named() {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        header.config.validate()?;
        if header.vocab.len() != header.config.vocab_size {
            return Err(bad("vocab size disagrees with config"));
        }
        let template = ModelParams::<f32>::init(&header.config, PAD as usize, &mut crate::seed::rng(0, &[]));
        let layout: Vec<(String, Vec<usize>)> = template.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
        if layout.len() != header.tensors.len()
            || layout.iter().zip(&header.tensors).any(|((n, s), t)| *n != t.name || *s != t.shape)
        {
            return Err(bad("tensor list does not match the config"));
        }
        let mut data = &bytes[20 + hlen..];
        let mut read_section = || -> Result<ModelParams<f32>> {
            let mut p = template.clone();
            for (name, t) in p.named_mut() {
                let n = t.data.len() * 4;
                if data.len() < n {
                    return Err(bad(format!("truncated data in {name}")));
                }
                for (v, chunk) in t.data.iter_mut().zip(data[..n].chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                data = &data[n..];
            }
            Ok(p)
        };
        let params = read_section()?;
        let m = read_section()?;
        let v = read_section()?;
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        for (name, t) in params.named() {
            if !t.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            adam: AdamState { step: header.step, m, v },
            metric_log: header.metric_log,
            best_epoch: header.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let vocab = Vocab::from_lines(["0 1 push"]);
        let model = Model::<f32>::new(ModelConfig::tiny(vocab.len()), 1).unwrap();
        let mut ck = Checkpoint::fresh(&model, vocab);
        ck.adam.step = 17;
        ck.adam.m.out_proj.weight.data[2] = 0.5;
        ck.metric_log.push(EpochRecord { epoch: 1, step: 17, train_loss: Some(1.25), valid_metric: 0.1 + 0.2, lr: 1e-4 });
        ck.best_epoch = 1;
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"LENLABCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest(), ck.digest());

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
