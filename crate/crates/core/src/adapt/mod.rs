//! Four transfer-learning strategies over a frozen-or-trainable dual
//! encoder: linear probing, full fine-tuning, prompt tuning, and a
//! residual adapter. Includes exact trainable-parameter accounting and
//! bitwise freeze verification.

mod digest;
mod model;
mod train;

pub use digest::{freeze_digest, FreezeCheck, FrozenDigest};
pub use model::{assemble_prompt, AdaptedModel, StrategyKind, StrategySpec};
pub use train::{train_adaptation, TrainOptions};

use crate::model::{EncoderConfig, ModelError};
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid strategy spec: {0}")]
    InvalidSpec(String),
    #[error("prompt needs M+3 <= context_len: M={m}, context_len={context_len}")]
    PromptCapacity { m: usize, context_len: usize },
    #[error("training set must contain both classes")]
    SingleClassTrainSet,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("class word '{0}' missing from vocabulary")]
    MissingClassWord(String),
    #[error("loss became non-finite at step {step} (lr {lr})")]
    NanLoss { step: u64, lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

/// Number of trainable scalars each strategy introduces (or, for full
/// fine-tuning, the whole backbone).
pub fn trainable_parameter_count(
    spec: &StrategySpec,
    config: &EncoderConfig,
    backbone_total: usize,
) -> usize {
    match spec {
        StrategySpec::LinearProbe => config.d_model + 1,
        StrategySpec::PromptTune { m } => m * config.d_model,
        StrategySpec::Adapter { reduction, .. } => {
            let hidden = config.d_embed / reduction;
            2 * config.d_embed * hidden + hidden + config.d_embed
        }
        StrategySpec::FineTune { .. } => backbone_total,
    }
}
