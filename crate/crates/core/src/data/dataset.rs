use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{generate_grid, GridConfig, SourceGrid, Split};
use super::speech::{ingest_speech, surrogate_speech, Recording, SurrogateConfig};
use super::store::{ExampleKey, ExampleStore, StoreHeader, StoreWriter};
use super::DataError;
use crate::nn::Tensor;
use crate::room::{render_scene, window_signal, ArrayGeometry, Point, RirConfig, RoomSpec, Scene};
use crate::seed::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_FILE: &str = "examples.bin";

const STREAM_SPEECH: u64 = 10;
const STREAM_ASSIGN: u64 = 11;
const STREAM_NOISE: u64 = 12;

const STANDARD_SNRS: [f64; 4] = [10.0, 15.0, 20.0, 25.0];
const STANDARD_T60S: [f64; 4] = [0.15, 0.3, 0.4, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub snr_db: f64,
    pub t60: f64,
}

impl Condition {
    pub fn label(&self) -> String {
        format!("snr{}db_t{}s", self.snr_db, self.t60)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpeechSource {
    Surrogate(SurrogateConfig),
    Corpus { dir: PathBuf },
}

impl Default for SpeechSource {
    fn default() -> Self {
        SpeechSource::Surrogate(SurrogateConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub conditions: Vec<Condition>,
    pub window_len: usize,
    pub speech: SpeechSource,
    pub rir: RirConfig,
    /// Splits to render; the others stay in the manifest without examples.
    pub splits: Vec<Split>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            room: RoomSpec::default(),
            array: ArrayGeometry::default(),
            conditions: vec![Condition {
                snr_db: 10.0,
                t60: 0.6,
            }],
            window_len: 5120,
            speech: SpeechSource::default(),
            rir: RirConfig::default(),
            splits: vec![Split::Train, Split::Val, Split::Test],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingInfo {
    pub name: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: usize,
    pub split: Split,
    pub position: Point,
    /// Index into `recordings`.
    pub recording: usize,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub condition: usize,
    pub source: usize,
    pub noise_seed: u64,
    pub first_example: usize,
    pub windows: usize,
}

/// Everything needed to regenerate the example store bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub recordings: Vec<RecordingInfo>,
    pub sources: Vec<SourceEntry>,
    pub scenes: Vec<SceneEntry>,
    pub n_examples: usize,
    pub store_sha256: String,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let m: Self = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if m.version != MANIFEST_VERSION {
            return Err(DataError::Mismatch(format!(
                "manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    /// Opens the store next to the manifest and checks it is the one described.
    pub fn open_store(&self, dir: &Path) -> Result<ExampleStore, DataError> {
        let store = ExampleStore::open(&dir.join(STORE_FILE))?;
        if store.checksum() != self.store_sha256 || store.len() != self.n_examples {
            return Err(DataError::Mismatch(
                "example store checksum differs from manifest".into(),
            ));
        }
        Ok(store)
    }

    pub fn source(&self, id: usize) -> Option<&SourceEntry> {
        self.sources.iter().find(|s| s.id == id)
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        self.source(id).map(|s| s.split)
    }

    fn check(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.sources {
            if !seen.insert(s.id) {
                return Err(DataError::Mismatch(format!(
                    "source {} appears twice",
                    s.id
                )));
            }
            if !self.config.room.contains(&s.position) {
                return Err(DataError::Mismatch(format!(
                    "source {} lies outside the room",
                    s.id
                )));
            }
        }
        let mut recs: Vec<usize> = self.sources.iter().map(|s| s.recording).collect();
        recs.sort_unstable();
        recs.dedup();
        if recs.len() != self.sources.len() {
            return Err(DataError::Mismatch("two sources share a recording".into()));
        }
        let total: usize = self.scenes.iter().map(|s| s.windows).sum();
        if total != self.n_examples {
            return Err(DataError::Mismatch(
                "scene windows do not add up to the example count".into(),
            ));
        }
        Ok(())
    }
}

fn sha_hex(samples: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in samples {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn validate(config: &DatasetConfig) -> Result<(), DataError> {
    if config.window_len == 0 || config.conditions.is_empty() || config.splits.is_empty() {
        return Err(DataError::Config(
            "window length, conditions and splits must be non-empty".into(),
        ));
    }
    if config.room.sample_rate != super::SAMPLE_RATE as f64 {
        return Err(DataError::Config(format!(
            "room sample rate {} differs from the {} Hz recordings",
            config.room.sample_rate,
            super::SAMPLE_RATE
        )));
    }
    for c in &config.conditions {
        if !(c.t60 >= 0.0) || c.snr_db.is_nan() {
            return Err(DataError::Config(format!("invalid condition {c:?}")));
        }
        if !STANDARD_SNRS.contains(&c.snr_db) || !STANDARD_T60S.contains(&c.t60) {
            log::warn!(
                "condition SNR {} dB / T60 {} s is outside the reference set",
                c.snr_db,
                c.t60
            );
        }
    }
    config.array.validate(&config.room)?;
    Ok(())
}

/// Renders every (condition, source) scene, windows it, and writes the
/// example store and manifest into `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    validate(config)?;
    let grid = generate_grid(&config.grid, &config.room, &config.array, config.seed)?;
    let sources: Vec<_> = grid
        .sources
        .iter()
        .filter(|s| config.splits.contains(&s.split))
        .collect();
    if sources.is_empty() {
        return Err(DataError::ZeroSources(
            "no source in the selected splits".into(),
        ));
    }

    let (recordings, assignment) = recordings_for(config, &grid)?;

    let mut entries = Vec::with_capacity(grid.sources.len());
    for (k, p) in grid.sources.iter().enumerate() {
        let rec = &recordings[assignment[k]];
        let windows = rec.samples.len() / config.window_len;
        if windows == 0 {
            return Err(DataError::RecordingTooShort {
                name: rec.name.clone(),
                len: rec.samples.len(),
                window: config.window_len,
            });
        }
        entries.push(SourceEntry {
            id: p.id,
            split: p.split,
            position: p.position,
            recording: assignment[k],
            windows,
        });
    }

    let mut scenes = Vec::new();
    let mut next = 0;
    for (ci, _) in config.conditions.iter().enumerate() {
        for s in &sources {
            let windows = entries[s.id].windows;
            scenes.push(SceneEntry {
                condition: ci,
                source: s.id,
                noise_seed: derive_seed(config.seed, &[STREAM_NOISE, ci as u64, s.id as u64]),
                first_example: next,
                windows,
            });
            next += windows;
        }
    }

    fs::create_dir_all(out_dir)?;
    let header = StoreHeader {
        window_len: config.window_len,
        n_mics: config.array.len(),
        count: next,
    };
    let mut writer = StoreWriter::create(&out_dir.join(STORE_FILE), header)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    for batch in scenes.chunks(workers.max(1)) {
        let rendered: Vec<Result<Vec<Tensor>, DataError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|sc| {
                    let entry = &entries[sc.source];
                    let rec = &recordings[entry.recording];
                    scope.spawn(move || render_windows(config, sc, entry, rec))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("render thread panicked"))
                .collect()
        });
        for (sc, windows) in batch.iter().zip(rendered) {
            let target = entries[sc.source].position;
            for (w, t) in windows?.iter().enumerate() {
                let key = ExampleKey {
                    condition: sc.condition,
                    source: sc.source,
                    window: w,
                };
                writer.push(key, &target, t)?;
            }
        }
        log::debug!("rendered {} scenes", batch.len());
    }
    let store_sha256 = writer.finish()?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        recordings: recordings
            .iter()
            .map(|r| RecordingInfo {
                name: r.name.clone(),
                samples: r.samples.len(),
                sha256: sha_hex(&r.samples),
            })
            .collect(),
        sources: entries,
        scenes,
        n_examples: next,
        store_sha256,
    };
    manifest.check()?;
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// The recordings of a dataset, in manifest order. Surrogates are
/// regenerated from their seeds; a corpus is re-read from disk.
pub fn load_recordings(config: &DatasetConfig) -> Result<Vec<Recording>, DataError> {
    let grid = generate_grid(&config.grid, &config.room, &config.array, config.seed)?;
    Ok(recordings_for(config, &grid)?.0)
}

/// Recordings plus the recording index assigned to each grid source.
fn recordings_for(
    config: &DatasetConfig,
    grid: &SourceGrid,
) -> Result<(Vec<Recording>, Vec<usize>), DataError> {
    let recordings: Vec<Recording> = match &config.speech {
        SpeechSource::Surrogate(s) => grid
            .sources
            .iter()
            .map(|p| {
                Ok(Recording {
                    name: format!("surrogate_{:05}", p.id),
                    samples: surrogate_speech(
                        s,
                        derive_seed(config.seed, &[STREAM_SPEECH, p.id as u64]),
                    )?,
                })
            })
            .collect::<Result<_, DataError>>()?,
        SpeechSource::Corpus { dir } => ingest_speech(dir)?,
    };
    if recordings.len() < grid.sources.len() {
        return Err(DataError::NotEnoughRecordings {
            needed: grid.sources.len(),
            available: recordings.len(),
        });
    }
    let mut assignment: Vec<usize> = (0..recordings.len()).collect();
    if matches!(config.speech, SpeechSource::Corpus { .. }) {
        assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[STREAM_ASSIGN],
        )));
    }
    assignment.truncate(grid.sources.len());
    Ok((recordings, assignment))
}

fn render_windows(
    config: &DatasetConfig,
    scene: &SceneEntry,
    source: &SourceEntry,
    recording: &Recording,
) -> Result<Vec<Tensor>, DataError> {
    let cond = config.conditions[scene.condition];
    let sc = Scene {
        room: config.room.with_t60(cond.t60),
        array: config.array.clone(),
        source_position: source.position,
        source_signal: recording.samples.clone(),
        snr_db: cond.snr_db,
        noise_seed: scene.noise_seed,
    };
    let rendered = render_scene(&sc, &config.rir)?;
    Ok(window_signal(&rendered.noisy, config.window_len)?)
}

/// Regenerates the dataset described by `manifest` into `out_dir` and checks
/// that recordings and example store match it exactly.
pub fn rebuild_dataset(
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    let rebuilt = build_dataset(&manifest.config, out_dir)?;
    if rebuilt.recordings != manifest.recordings {
        return Err(DataError::Mismatch(
            "recordings differ from the manifest".into(),
        ));
    }
    if rebuilt.store_sha256 != manifest.store_sha256 {
        return Err(DataError::Mismatch(
            "rebuilt example store differs from the manifest".into(),
        ));
    }
    Ok(rebuilt)
}
