//! Temporal 6D pose network on top of `candle` tensors, with its optimizer,
//! checkpoint format and training loop.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod network;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;
use videopose_core::data::DataError;
use videopose_core::geometry::GeometryError;
use videopose_core::losses::LossError;
use videopose_core::metrics::MetricsError;
use videopose_core::objects::ObjectsError;

pub use config::{EncoderConfig, ModelConfig, TemporalVariant, TzSource, WarpMode};
pub use network::{
    FrameFeatures, ImageCamera, Network, ObjectQuery, PoseHeadOutput, TemporalState, Tracker,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid ROI: {0}")]
    InvalidRoi(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Objects(#[from] ObjectsError),
}
