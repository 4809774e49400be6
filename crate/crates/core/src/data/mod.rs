//! Source grids, speech ingestion and synthesis, and reproducible dataset
//! assembly into a manifest plus a binary example store.

mod dataset;
mod grid;
mod speech;
mod store;

pub use dataset::{
    build_dataset, load_recordings, rebuild_dataset, Condition, DatasetConfig, DatasetManifest,
    RecordingInfo, SceneEntry, SourceEntry, SpeechSource, MANIFEST_FILE, MANIFEST_VERSION,
    STORE_FILE,
};
pub use grid::{generate_grid, GridConfig, SourceGrid, SourcePoint, Split};
pub use speech::{
    ingest_speech, resample, surrogate_speech, Recording, SurrogateConfig, SAMPLE_RATE,
};
pub(crate) use store::StoreWriter;
pub use store::{ExampleKey, ExampleSet, ExampleStore, StoreHeader, StoreView};

use std::path::PathBuf;

use thiserror::Error;

use crate::room::RoomError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("grid produces no sources: {0}")]
    ZeroSources(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("no WAV files in {0}")]
    NoRecordings(PathBuf),
    #[error("cannot read {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("recording `{0}` is silent")]
    SilentRecording(String),
    #[error("resampling failed: {0}")]
    Resample(String),
    #[error("{needed} sources need distinct recordings but only {available} are available")]
    NotEnoughRecordings { needed: usize, available: usize },
    #[error("recording `{name}` ({len} samples) is shorter than one {window}-sample window")]
    RecordingTooShort {
        name: String,
        len: usize,
        window: usize,
    },
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("example store is corrupt: {0}")]
    Corrupt(String),
    #[error("example store is truncated")]
    Truncated,
    #[error("dataset does not match its manifest: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Room(#[from] RoomError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
