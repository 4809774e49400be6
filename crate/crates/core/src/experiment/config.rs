use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::{Condition, DatasetConfig, GridConfig, SpeechSource, SurrogateConfig};
use crate::dsp::{SctThreshold, TdoaConfig};
use crate::lrp::{Selector, DEFAULT_EPSILON, DEFAULT_GAMMA};
use crate::models::{LocCnnConfig, ModelConfig, SampleCnnConfig};
use crate::nn::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(format!("unknown scale `{other}` (expected desk or full)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    LocCnn,
    SampleCnn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::LocCnn => "loccnn",
            Arch::SampleCnn => "samplecnn",
        }
    }

    /// Column label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Arch::LocCnn => "LocCNN",
            Arch::SampleCnn => "SampleCNN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub loccnn_lr: f64,
    pub samplecnn_lr: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 100,
            max_epochs: 1000,
            lr_patience: 100,
            stop_patience: 200,
            loccnn_lr: 1e-3,
            samplecnn_lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpSettings {
    pub gamma: f64,
    pub epsilon: f64,
    pub selector: Selector,
    /// Relative conservation tolerance checked for every attributed window.
    pub audit_tolerance: f64,
    /// Write one multichannel relevance WAV per test source.
    pub export_wav: bool,
}

impl Default for LrpSettings {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            selector: Selector::Sum,
            audit_tolerance: 1e-4,
            export_wav: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Amplitude,
    Lrp,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Amplitude => "amplitude",
            Strategy::Lrp => "lrp",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaeMetric {
    /// Mean Euclidean distance.
    #[default]
    Euclidean,
    /// Mean per-axis absolute error.
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateSettings {
    pub fractions: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Rank within each microphone channel instead of across the window.
    pub per_channel: bool,
    pub metric: MaeMetric,
}

impl Default for ManipulateSettings {
    fn default() -> Self {
        Self {
            fractions: (0..8).map(|i| i as f64 / 10.0).collect(),
            strategies: vec![Strategy::Random, Strategy::Amplitude, Strategy::Lrp],
            per_channel: false,
            metric: MaeMetric::Euclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdoaSettings {
    pub spacings: Vec<f64>,
    pub lag_margin: usize,
    pub concat: bool,
    pub sct_threshold: SctThreshold,
}

impl Default for TdoaSettings {
    fn default() -> Self {
        let c = TdoaConfig::default();
        Self {
            spacings: c.spacings,
            lag_margin: c.lag_margin,
            concat: c.concat,
            sct_threshold: SctThreshold::default(),
        }
    }
}

impl TdoaSettings {
    pub fn config(&self) -> TdoaConfig {
        TdoaConfig {
            spacings: self.spacings.clone(),
            lag_margin: self.lag_margin,
            concat: self.concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSettings {
    pub nfft: usize,
    pub hop: usize,
    /// Test source to export; the first test source when unset.
    pub source: Option<usize>,
    pub mic: usize,
}

impl Default for StftSettings {
    fn default() -> Self {
        Self {
            nfft: 512,
            hop: 128,
            source: None,
            mic: 0,
        }
    }
}

/// Everything a command needs. Written back, fully resolved, next to the
/// outputs of every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub scale: Scale,
    /// Master seed; also used as the dataset seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub models: Vec<Arch>,
    /// Train one model across all conditions instead of one per condition.
    pub pooled: bool,
    pub dataset: DatasetConfig,
    pub loccnn: LocCnnConfig,
    pub samplecnn: SampleCnnConfig,
    pub train: TrainSettings,
    pub lrp: LrpSettings,
    pub manipulate: ManipulateSettings,
    pub tdoa: TdoaSettings,
    pub stft: StftSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Scale::Desk)
    }
}

const ALL_SNRS: [f64; 4] = [10.0, 15.0, 20.0, 25.0];
const ALL_T60S: [f64; 4] = [0.15, 0.3, 0.4, 0.6];

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let mut cfg = match scale {
            Scale::Full => Self {
                experiment: "full".into(),
                scale,
                seed: 0,
                out_dir: PathBuf::from("runs/full"),
                models: vec![Arch::LocCnn, Arch::SampleCnn],
                pooled: false,
                dataset: DatasetConfig {
                    grid: GridConfig::full(),
                    conditions: ALL_SNRS
                        .iter()
                        .flat_map(|&snr_db| {
                            ALL_T60S.iter().map(move |&t60| Condition { snr_db, t60 })
                        })
                        .collect(),
                    ..DatasetConfig::default()
                },
                loccnn: LocCnnConfig::default(),
                samplecnn: SampleCnnConfig::default(),
                train: TrainSettings::default(),
                lrp: LrpSettings::default(),
                manipulate: ManipulateSettings::default(),
                tdoa: TdoaSettings::default(),
                stft: StftSettings::default(),
            },
            Scale::Desk => Self {
                experiment: "desk".into(),
                scale,
                seed: 0,
                out_dir: PathBuf::from("runs/desk"),
                models: vec![Arch::LocCnn],
                pooled: false,
                dataset: DatasetConfig {
                    conditions: vec![
                        Condition {
                            snr_db: 25.0,
                            t60: 0.15,
                        },
                        Condition {
                            snr_db: 10.0,
                            t60: 0.6,
                        },
                    ],
                    speech: SpeechSource::Surrogate(SurrogateConfig {
                        duration_s: 3.2,
                        ..SurrogateConfig::default()
                    }),
                    ..DatasetConfig::default()
                },
                loccnn: LocCnnConfig {
                    channels: vec![8, 16, 16, 32, 32],
                    pool_sizes: vec![4; 5],
                    dense_width: 64,
                    ..LocCnnConfig::default()
                },
                samplecnn: SampleCnnConfig {
                    stem_channels: 16,
                    block_channels: vec![16, 16, 32, 32, 32],
                    se_ratio: 4,
                    ..SampleCnnConfig::default()
                },
                train: TrainSettings {
                    batch_size: 16,
                    max_epochs: 60,
                    lr_patience: 5,
                    stop_patience: 15,
                    ..TrainSettings::default()
                },
                lrp: LrpSettings::default(),
                manipulate: ManipulateSettings::default(),
                tdoa: TdoaSettings::default(),
                stft: StftSettings::default(),
            },
        };
        cfg.resolve();
        cfg
    }

    /// Parses a TOML file layered over the preset named by its `scale` key
    /// (or `default_scale` when absent).
    pub fn from_toml(text: &str, default_scale: Scale) -> Result<Self, ExperimentError> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let scale = match user.get("scale") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| ExperimentError::Config("`scale` must be a string".into()))?
                .parse()
                .map_err(ExperimentError::Config)?,
            None => default_scale,
        };
        let base = toml::Table::try_from(Self::preset(scale))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let merged = merge(base, user);
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_scale: Scale) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, default_scale)
    }

    /// Propagates the master seed into the dataset. Call again after
    /// overriding `seed`.
    pub fn resolve(&mut self) {
        self.dataset.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.models.is_empty() {
            return bad("at least one model must be listed".into());
        }
        if let Some(f) = self
            .manipulate
            .fractions
            .iter()
            .find(|f| !(0.0..1.0).contains(*f))
        {
            return bad(format!("manipulation fraction {f} outside [0, 1)"));
        }
        if self.lrp.gamma < 0.0 || self.lrp.epsilon < 0.0 || !(self.lrp.audit_tolerance >= 0.0) {
            return bad("gamma, epsilon and audit tolerance must be non-negative".into());
        }
        if self.stft.nfft == 0 || self.stft.hop == 0 {
            return bad("STFT size and hop must be positive".into());
        }
        if self.stft.mic >= self.dataset.array.len() {
            return bad(format!("STFT microphone {} does not exist", self.stft.mic));
        }
        for arch in &self.models {
            let m = self.model(*arch);
            if m.build().is_err() {
                return bad(format!("{} configuration does not build", arch.name()));
            }
        }
        if self.loccnn.input_len != self.dataset.window_len
            || self.samplecnn.input_len != self.dataset.window_len
        {
            return bad("model input length must equal the dataset window length".into());
        }
        if self.loccnn.n_mics != self.dataset.array.len()
            || self.samplecnn.n_mics != self.dataset.array.len()
        {
            return bad("model microphone count must equal the array size".into());
        }
        Ok(())
    }

    pub fn model(&self, arch: Arch) -> ModelConfig {
        match arch {
            Arch::LocCnn => ModelConfig::LocCnn(self.loccnn.clone()),
            Arch::SampleCnn => ModelConfig::SampleCnn(self.samplecnn.clone()),
        }
    }

    pub fn train_config(&self, arch: Arch) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            learning_rate: match arch {
                Arch::LocCnn => self.train.loccnn_lr,
                Arch::SampleCnn => self.train.samplecnn_lr,
            },
            lr_patience: self.train.lr_patience,
            stop_patience: self.train.stop_patience,
            seed: crate::seed::derive_seed(self.seed, &[20, arch as u64]),
            ..TrainConfig::default()
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
}

/// Recursive table merge; values in `over` win. A table that names a
/// different `kind` replaces the base table instead of merging into it.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    if over
        .get("kind")
        .is_some_and(|k| base.get("kind") != Some(k))
    {
        return over;
    }
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
