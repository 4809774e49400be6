//! End-to-end experiment commands: dataset assembly, training, relevance
//! attribution, input manipulation, TDoA analysis and STFT export.
//!
//! Every command writes its fully resolved configuration to
//! `<out_dir>/frozen/<command>.toml`; rerunning from that file reproduces
//! the numeric outputs byte for byte.

mod commands;
mod config;
mod manipulate;

pub use commands::{
    cmd_attribute, cmd_dataset, cmd_manipulate, cmd_stft_export, cmd_tdoa, cmd_train,
    condition_groups, mae, AuditSummary, ConditionGroup, TrainOutcome,
};
pub use config::{
    Arch, LrpSettings, MaeMetric, ManipulateSettings, RunConfig, Scale, StftSettings, Strategy,
    TdoaSettings, TrainSettings,
};
pub use manipulate::{manipulate_window, mask_count, ManipulationCurve, ManipulationResult};

use thiserror::Error;

use crate::data::DataError;
use crate::dsp::DspError;
use crate::lrp::LrpError;
use crate::nn::NnError;

/// Broad failure class, mapped to process exit codes by the binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Lrp(#[from] LrpError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("relevance conservation audit failed for {failed} of {total} windows ({store})")]
    Audit {
        store: String,
        failed: usize,
        total: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn class(&self) -> ErrorClass {
        match self {
            ExperimentError::Config(_) => ErrorClass::Config,
            ExperimentError::Missing(_) => ErrorClass::Data,
            ExperimentError::Data(DataError::Config(_)) => ErrorClass::Config,
            ExperimentError::Data(DataError::Io(_)) => ErrorClass::Io,
            ExperimentError::Data(_) => ErrorClass::Data,
            ExperimentError::Nn(NnError::Diverged { .. } | NnError::NonFinite { .. }) => {
                ErrorClass::Numeric
            }
            ExperimentError::Nn(NnError::Config(_)) => ErrorClass::Config,
            ExperimentError::Nn(NnError::Io(_)) => ErrorClass::Io,
            ExperimentError::Nn(_) => ErrorClass::Data,
            ExperimentError::Lrp(LrpError::NonFinite(_)) | ExperimentError::Audit { .. } => {
                ErrorClass::Numeric
            }
            ExperimentError::Lrp(LrpError::Io(_)) => ErrorClass::Io,
            ExperimentError::Lrp(_) => ErrorClass::Data,
            ExperimentError::Dsp(DspError::Io(_)) => ErrorClass::Io,
            ExperimentError::Dsp(_) => ErrorClass::Data,
            ExperimentError::Io(_) => ErrorClass::Io,
            ExperimentError::Json(_) => ErrorClass::Data,
        }
    }
}
