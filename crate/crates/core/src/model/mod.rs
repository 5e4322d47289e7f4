//! Toy dual encoder in the CLIP mold: a causal text transformer and a
//! patch-linear vision transformer projecting into one shared L2-normalized
//! embedding space, plus contrastive pre-training.

mod config;
mod encoder;
mod pretrain;
mod vocab;

pub use config::EncoderConfig;
pub use encoder::{
    cosine_logits, patchify, BlockVars, BranchVars, DualEncoder, EmbeddingPair, ModelVars,
    LOGIT_SCALE_INIT, MAX_LOGIT_SCALE,
};
pub use pretrain::{clip_contrastive_loss, pretrain_toy, PretrainOptions};
pub use vocab::{tokenize, TokenSeq, Vocabulary, EOS_ID, PAD_ID, SOS_ID};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("word '{0}' is not in the vocabulary")]
    UnknownWord(String),
    #[error("vocabulary holds {size} tokens, limit is {max}")]
    VocabTooLarge { size: usize, max: usize },
    #[error("malformed vocabulary: {0}")]
    MalformedVocab(String),
    #[error("expected a {expected}x{expected} image, got {got_w}x{got_h}")]
    ImageSize {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("token sequence length {got} does not match context length {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("embedding norm {norm} violates the unit-norm contract")]
    NonUnitNorm { norm: f64 },
    #[error("contrastive batches need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step} (lr {lr})")]
    NanLoss { step: u64, lr: f64 },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
