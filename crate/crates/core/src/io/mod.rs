//! Experiment configuration, checkpoint persistence, and report emission.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{
    load_adapted, load_backbone, read_checkpoint, save_adapted, save_backbone, write_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ExperimentConfig;
pub use report::{
    atomic_write, emit_loss_curve, emit_metrics_report, emit_sweep_result, features_csv,
    file_sha256, metrics_csv, metrics_json, sweep_csv, sweep_json, sweep_plot_data, RunManifest,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("unknown config key '{0}'")]
    UnknownConfigKey(String),
    #[error("bad value for config key '{key}': {message}")]
    BadConfigValue { key: String, message: String },
    #[error("malformed config line '{0}' (expected key=value)")]
    MalformedConfigLine(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("checkpoint dtype does not match the requested element type")]
    DtypeMismatch,
    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("strategy error: {0}")]
    Adapt(#[from] crate::adapt::AdaptError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("io failure on {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IoError>;

pub(crate) fn file_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}
