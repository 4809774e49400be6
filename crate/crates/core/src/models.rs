//! The two localization architectures, built as [`LayerGraph`]s mapping a
//! `(samples, microphones)` window to a 3-D source position.

use serde::{Deserialize, Serialize};

use crate::nn::{
    BranchTag, Conv1d, Dense, Edge, GraphBuilder, Init, LayerGraph, LayerKind, NnError,
};

/// Stacked convolution blocks, each `Conv1d -> ReLU -> MaxPool1d`, followed
/// by a two-layer dense head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocCnnConfig {
    pub input_len: usize,
    pub n_mics: usize,
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub dense_width: usize,
    pub dropout: f64,
    pub output_dim: usize,
}

impl Default for LocCnnConfig {
    fn default() -> Self {
        Self {
            input_len: 5120,
            n_mics: 16,
            channels: vec![96, 96, 128, 128, 128],
            kernel_sizes: vec![7; 5],
            // The last pool is shrunk so the chain ends at length 1.
            pool_sizes: vec![7, 7, 7, 7, 2],
            dense_width: 500,
            dropout: 0.0,
            output_dim: 3,
        }
    }
}

impl LocCnnConfig {
    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    fn check(&self) -> Result<(), NnError> {
        let n = self.channels.len();
        if n == 0 || self.kernel_sizes.len() != n || self.pool_sizes.len() != n {
            return Err(NnError::Config(format!(
                "LocCNN needs equal-length channels/kernel_sizes/pool_sizes, got {}/{}/{}",
                n,
                self.kernel_sizes.len(),
                self.pool_sizes.len()
            )));
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(NnError::Config("LocCNN kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// Sequence length after the last pooling stage, if the chain is valid.
    pub fn final_len(&self) -> Option<usize> {
        self.pool_sizes.iter().try_fold(self.input_len, |len, &p| {
            let next = len / p.max(1);
            (p > 0 && next > 0).then_some(next)
        })
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> Option<usize> {
        let mut total = 0;
        let mut c_in = self.n_mics;
        for (c, k) in self.channels.iter().zip(&self.kernel_sizes) {
            total += c_in * c * k + c;
            c_in = *c;
        }
        let flat = self.final_len()? * c_in;
        total += flat * self.dense_width + self.dense_width;
        total += self.dense_width * self.output_dim + self.output_dim;
        Some(total)
    }
}

/// Residual squeeze-and-excitation blocks after a strided stem convolution.
///
/// Each block: `Conv -> ReLU` (channel change, output `h`), then a main
/// branch `Conv -> ReLU` added to the identity shortcut `h`, then an SE gate
/// `GAP -> Dense -> ReLU -> Dense -> Sigmoid` multiplying the sum, then
/// max pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCnnConfig {
    pub input_len: usize,
    pub n_mics: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub se_ratio: usize,
    pub dropout: f64,
    pub output_dim: usize,
}

impl Default for SampleCnnConfig {
    fn default() -> Self {
        Self {
            input_len: 5120,
            n_mics: 16,
            stem_channels: 128,
            stem_kernel: 3,
            stem_stride: 3,
            block_channels: vec![128, 128, 256, 256, 512],
            kernel: 3,
            pool: 3,
            se_ratio: 16,
            dropout: 0.0,
            output_dim: 3,
        }
    }
}

impl SampleCnnConfig {
    pub fn n_blocks(&self) -> usize {
        self.block_channels.len()
    }

    fn check(&self) -> Result<(), NnError> {
        if self.block_channels.is_empty() {
            return Err(NnError::Config("SampleCNN needs at least one block".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(NnError::Config("SampleCNN block kernel must be odd".into()));
        }
        if self.se_ratio == 0 || self.stem_stride == 0 || self.pool == 0 {
            return Err(NnError::Config(
                "se_ratio, stem_stride and pool must be positive".into(),
            ));
        }
        Ok(())
    }

    fn bottleneck(&self, c: usize) -> usize {
        (c / self.se_ratio).max(1)
    }

    pub fn final_len(&self) -> Option<usize> {
        if self.input_len < self.stem_kernel {
            return None;
        }
        let stem = (self.input_len - self.stem_kernel) / self.stem_stride + 1;
        self.block_channels.iter().try_fold(stem, |len, _| {
            let next = len / self.pool;
            (next > 0).then_some(next)
        })
    }

    pub fn param_count(&self) -> Option<usize> {
        let mut total = self.n_mics * self.stem_channels * self.stem_kernel + self.stem_channels;
        let mut c_in = self.stem_channels;
        for &c in &self.block_channels {
            let b = self.bottleneck(c);
            total += c_in * c * self.kernel + c;
            total += c * c * self.kernel + c;
            total += c * b + b + b * c + c;
            c_in = c;
        }
        total += self.final_len()? * c_in * self.output_dim + self.output_dim;
        Some(total)
    }
}

fn arch_tag<T: Serialize>(name: &str, cfg: &T) -> String {
    format!(
        "{name}:{}",
        serde_json::to_string(cfg).expect("config serializes")
    )
}

pub fn build_loccnn(config: &LocCnnConfig) -> Result<LayerGraph, NnError> {
    config.check()?;
    let mut b = GraphBuilder::new(vec![config.input_len, config.n_mics]);
    let mut c_in = config.n_mics;
    let mut len = config.input_len;
    for (i, ((&c, &k), &p)) in config
        .channels
        .iter()
        .zip(&config.kernel_sizes)
        .zip(&config.pool_sizes)
        .enumerate()
    {
        let n = i + 1;
        b.chain_init(
            format!("conv{n}"),
            LayerKind::Conv1d(Conv1d::same(c_in, c, k)),
            Init::HeUniform,
        );
        b.chain(format!("relu{n}"), LayerKind::Relu);
        b.chain(format!("pool{n}"), LayerKind::MaxPool1d { size: p });
        c_in = c;
        len /= p.max(1);
    }
    let flat = len * c_in;
    b.chain_init(
        "fc1",
        LayerKind::Dense(Dense::new(flat, config.dense_width)),
        Init::HeUniform,
    );
    b.chain("fc1_relu", LayerKind::Relu);
    b.chain(
        "dropout",
        LayerKind::Dropout {
            rate: config.dropout,
        },
    );
    b.chain_init(
        "out",
        LayerKind::Dense(Dense::new(config.dense_width, config.output_dim)),
        Init::GlorotUniform,
    );
    b.finish(arch_tag("loccnn", config))
}

pub fn build_samplecnn(config: &SampleCnnConfig) -> Result<LayerGraph, NnError> {
    config.check()?;
    let mut b = GraphBuilder::new(vec![config.input_len, config.n_mics]);
    b.chain_init(
        "stem",
        LayerKind::Conv1d(Conv1d::new(
            config.n_mics,
            config.stem_channels,
            config.stem_kernel,
            config.stem_stride,
            0,
        )),
        Init::HeUniform,
    );
    b.chain("stem_relu", LayerKind::Relu);
    let mut c_in = config.stem_channels;
    let mut len = if config.input_len >= config.stem_kernel {
        (config.input_len - config.stem_kernel) / config.stem_stride + 1
    } else {
        0
    };
    for (i, &c) in config.block_channels.iter().enumerate() {
        let n = i + 1;
        let k = config.kernel;
        b.chain_init(
            format!("block{n}_conv_in"),
            LayerKind::Conv1d(Conv1d::same(c_in, c, k)),
            Init::HeUniform,
        );
        let h = b.chain(format!("block{n}_relu_in"), LayerKind::Relu);
        b.chain_init(
            format!("block{n}_conv"),
            LayerKind::Conv1d(Conv1d::same(c, c, k)),
            Init::HeUniform,
        );
        let main = b.chain(format!("block{n}_relu"), LayerKind::Relu);
        let sum = b.add(
            format!("block{n}_add"),
            LayerKind::ResidualAdd,
            vec![
                Edge::tagged(main, BranchTag::Main),
                Edge::tagged(h, BranchTag::Skip),
            ],
        );
        let hidden = config.bottleneck(c);
        b.chain(format!("block{n}_se_pool"), LayerKind::GlobalAvgPool1d);
        b.chain_init(
            format!("block{n}_se_fc1"),
            LayerKind::Dense(Dense::new(c, hidden)),
            Init::HeUniform,
        );
        b.chain(format!("block{n}_se_relu"), LayerKind::Relu);
        b.chain_init(
            format!("block{n}_se_fc2"),
            LayerKind::Dense(Dense::new(hidden, c)),
            Init::GlorotUniform,
        );
        let gate = b.chain(format!("block{n}_se_sigmoid"), LayerKind::Sigmoid);
        b.add(
            format!("block{n}_gate"),
            LayerKind::Multiply,
            vec![
                Edge::tagged(sum, BranchTag::Signal),
                Edge::tagged(gate, BranchTag::Gate),
            ],
        );
        b.chain(
            format!("block{n}_pool"),
            LayerKind::MaxPool1d { size: config.pool },
        );
        c_in = c;
        len /= config.pool;
    }
    b.chain(
        "dropout",
        LayerKind::Dropout {
            rate: config.dropout,
        },
    );
    b.chain_init(
        "out",
        LayerKind::Dense(Dense::new(len * c_in, config.output_dim)),
        Init::GlorotUniform,
    );
    b.finish(arch_tag("samplecnn", config))
}

/// Either architecture, as selected in run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    LocCnn(LocCnnConfig),
    SampleCnn(SampleCnnConfig),
}

impl ModelConfig {
    pub fn build(&self) -> Result<LayerGraph, NnError> {
        match self {
            ModelConfig::LocCnn(c) => build_loccnn(c),
            ModelConfig::SampleCnn(c) => build_samplecnn(c),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::LocCnn(_) => "loccnn",
            ModelConfig::SampleCnn(_) => "samplecnn",
        }
    }

    /// Learning rates used for the two architectures.
    pub fn default_learning_rate(&self) -> f64 {
        match self {
            ModelConfig::LocCnn(_) => 1e-3,
            ModelConfig::SampleCnn(_) => 1e-2,
        }
    }
}
