//! Minimal layer-graph engine: recorded forward passes, reverse-mode
//! gradients, Adam training, and a portable checkpoint format.

mod checkpoint;
mod graph;
mod layer;
mod tensor;
mod train;

pub use checkpoint::{load_weights, save_weights, Checkpoint, CHECKPOINT_VERSION};
pub use graph::{
    BranchTag, Edge, ForwardTrace, Gradients, GraphBuilder, LayerGraph, Mode, Node, Source,
};
pub(crate) use layer::argmax;
pub use layer::{Conv1d, Dense, Init, LayerKind};
pub use tensor::Tensor;
pub use train::{
    evaluate_mse, train, Adam, AdamConfig, EpochRecord, Example, LossHistory, PlateauEvent,
    PlateauSchedule, Samples, TrainConfig, Trainer,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("non-finite value in layer `{layer}`: {detail}")]
    NonFinite { layer: String, detail: String },
    #[error("trace is stale: the graph changed since the forward pass")]
    StaleTrace,
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint architecture fingerprint does not match the graph")]
    FingerprintMismatch,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
