//! Encoder-decoder Transformer with hand-written backward pass.

pub mod checkpoint;
pub mod float;
pub mod infer;
pub mod layers;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;
pub mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use float::Float;
pub use infer::{DecoderState, EncodedSource};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use params::{ModelParams, Tensor};
pub use train::{train, EpochRecord, Init, TrainConfig, TrainOutcome, ValidMetric};
pub use transformer::{cross_entropy, positional_encoding, Batch, EncodedPair, Model, Tape};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("sequence of length {len} exceeds max_positions={max_positions}")]
    TooLong { len: usize, max_positions: usize },
    #[error("token id {id} out of range for vocab_size={vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty batch or empty sequence")]
    EmptyInput,
    #[error("every gold token is padding")]
    AllPad,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64, last_good: Box<Checkpoint> },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// The string-task architecture: 1 layer, width 128, 8 heads.
    pub fn string_tasks(vocab_size: usize) -> Self {
        ModelConfig { d_model: 128, d_ff: 512, heads: 8, enc_layers: 1, dec_layers: 1, dropout: 0.3, max_positions: 256, vocab_size }
    }

    /// Width 8, 2 heads, one layer each side, no dropout. For tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig { d_model: 8, d_ff: 16, heads: 2, enc_layers: 1, dec_layers: 1, dropout: 0.0, max_positions: 64, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Train mode enables dropout with masks drawn from the given seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}
