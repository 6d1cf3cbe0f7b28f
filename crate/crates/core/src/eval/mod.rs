//! Downstream evaluation: cross-modal retrieval, staging fine-tunes,
//! night-level probes and the metric suite.

mod finetune;
mod metrics;
mod report;
mod retrieval;

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::modality::Modality;
use crate::model::ModelError;

pub use finetune::{
    aggregate_probe, aggregate_probe_with, chunk_ranges, night_cls, staging_finetune, FinetuneConfig, ProbeConfig,
    SupervisedReport, STAGE_LABELS,
};
pub use metrics::{metrics, roc_auc, ConfusionMatrix, Metrics};
pub use report::{config_hash, recall_heatmap_svg};
pub use retrieval::{embed_segments, recall_at_1, retrieval_matrix, RetrievalConfig, RetrievalReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error("confusion matrix has no entries")]
    EmptyMatrix,
    #[error("need at least two modalities, found {0}")]
    InsufficientModalities(usize),
    #[error("modality {0} is not available in both model and corpus")]
    UnknownModality(Modality),
    #[error("no usable labels: {0}")]
    NoLabels(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownModality(m) => EvalError::UnknownModality(m),
            other => EvalError::Model(other),
        }
    }
}
