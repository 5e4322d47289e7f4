//! Metric computation and experiment sweeps: per-family AP/accuracy with
//! mAP aggregation, the post-processing robustness grid, few-shot runs, and
//! the train-size ablation.

mod metrics;
mod sweep;

pub use metrics::{accuracy_at_threshold, average_precision, mean_ap, ScoredItem};
pub use sweep::{
    evaluate_families, robustness_sweep, score_eval_set, size_ablation, Perturbation,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::AdaptError;
use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision is undefined without positive items")]
    NoPositives,
    #[error("metric over an empty item list")]
    EmptyItems,
    #[error("ablation sizes must be ascending and even, got {0:?}")]
    BadAblationSizes(Vec<usize>),
    #[error("ablation failed at train size {size}: {source}")]
    AblationSize {
        size: usize,
        #[source]
        source: Box<AdaptError>,
    },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Identification shared by every emitted report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    pub strategy: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub family: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub ap: f64,
    pub acc: f64,
}

/// Per-dataset rows plus the unweighted aggregates of Table-style reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub rows: Vec<ReportRow>,
    pub map: f64,
    pub mean_acc: f64,
}

impl MetricsReport {
    pub fn from_rows(meta: RunMeta, rows: Vec<ReportRow>) -> Self {
        let map = mean_ap(rows.iter().map(|r| r.ap));
        let mean_acc = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.acc).sum::<f64>() / rows.len() as f64
        };
        Self {
            meta,
            rows,
            map,
            mean_acc,
        }
    }
}

/// One cell of the post-processing robustness grid. Metric failures are
/// recorded in `error` so the rest of the sweep can continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub family: String,
    pub perturbation: String,
    pub parameter: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub ap: Option<f64>,
    pub acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub meta: RunMeta,
    pub cells: Vec<SweepCell>,
}
