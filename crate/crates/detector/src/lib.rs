//! A small text-conditioned detector trained with presence-matrix
//! pseudo-labels and image-feature substitution, on candle.

use std::path::PathBuf;

use thiserror::Error;

pub mod assign;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ops;
pub mod train;

pub use config::{LossConfig, ModelConfig, TrainConfig};
pub use model::Detector;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("embedding dimension {got} does not match the network's {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("input: {0}")]
    Input(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for configuration {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Vocabulary(#[from] ovd_core::vocabulary::VocabularyError),
    #[error(transparent)]
    PseudoLabel(#[from] ovd_core::pseudo_label::PseudoLabelError),
    #[error(transparent)]
    Metrics(#[from] ovd_core::metrics::MetricsError),
    #[error(transparent)]
    Encoder(#[from] ovd_core::encoder::EncoderError),
}
