//! Image-source room simulation: impulse responses, multichannel scene
//! rendering with calibrated white noise, and fixed-length windowing.

mod cache;
mod ism;

pub use cache::SceneCache;
pub use ism::{simulate_rir, simulate_rirs, AbsorptionModel, RirConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::fft_convolve;
use crate::nn::Tensor;

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum RoomError {
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("{what} at {point:?} is not strictly inside the room")]
    OutsideRoom { what: String, point: Point },
    #[error("reverberation time {t60} s is unreachable for this room (reflection coefficient would exceed 1)")]
    UnreachableT60 { t60: f64 },
    #[error("source signal is silent")]
    SilentSource,
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid array: {0}")]
    InvalidArray(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt scene cache entry: {0}")]
    Cache(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSpec {
    /// Width, length, height in meters.
    pub dimensions: [f64; 3],
    /// Target reverberation time in seconds; 0 means fully absorbent walls.
    pub t60: f64,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            dimensions: [3.6, 8.2, 2.4],
            t60: 0.3,
            speed_of_sound: 343.0,
            sample_rate: 16000.0,
        }
    }
}

impl RoomSpec {
    pub fn with_t60(&self, t60: f64) -> Self {
        Self {
            t60,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        if self.dimensions.iter().any(|d| !(*d > 0.0)) {
            return Err(RoomError::InvalidRoom(format!(
                "dimensions {:?} must be positive",
                self.dimensions
            )));
        }
        if !(self.t60 >= 0.0) || !(self.speed_of_sound > 0.0) || !(self.sample_rate > 0.0) {
            return Err(RoomError::InvalidRoom(
                "t60 must be non-negative; speed of sound and sample rate positive".into(),
            ));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(v, d)| *v > 0.0 && v < d)
    }

    pub(crate) fn require_inside(&self, what: &str, p: &Point) -> Result<(), RoomError> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(RoomError::OutsideRoom {
                what: what.to_string(),
                point: *p,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<Point>,
}

impl ArrayGeometry {
    /// Uniform linear array along x.
    pub fn ula(n_mics: usize, first_x: f64, spacing: f64, y: f64, z: f64) -> Self {
        Self {
            mic_positions: (0..n_mics)
                .map(|i| [first_x + spacing * i as f64, y, z])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mic_positions.is_empty()
    }

    pub fn center(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    pub fn validate(&self, room: &RoomSpec) -> Result<(), RoomError> {
        if self.is_empty() {
            return Err(RoomError::InvalidArray("no microphones".into()));
        }
        for (i, p) in self.mic_positions.iter().enumerate() {
            room.require_inside(&format!("microphone {i}"), p)?;
            for q in &self.mic_positions[..i] {
                if distance(p, q) == 0.0 {
                    return Err(RoomError::InvalidArray(format!(
                        "microphone {i} duplicates another position"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::ula(16, 0.575, 0.15, 7.0, 1.2)
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// A single source in a room observed by an array.
#[derive(Clone, Debug)]
pub struct Scene {
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub source_position: Point,
    pub source_signal: Vec<f64>,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub noise_seed: u64,
}

/// Per-channel microphone signals, `channels[m][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multichannel {
    pub channels: Vec<Vec<f64>>,
}

impl Multichannel {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(samples, channels)` tensor of samples `[start, start + len)`.
    pub fn to_tensor(&self, start: usize, len: usize) -> Tensor {
        let m = self.n_channels();
        let mut data = vec![0.0; len * m];
        for (c, ch) in self.channels.iter().enumerate() {
            for (n, v) in ch[start..start + len].iter().enumerate() {
                data[n * m + c] = *v;
            }
        }
        Tensor::new(vec![len, m], data).expect("consistent shape")
    }
}

/// Rendered microphone signals with the clean (noise-free) part kept for
/// SNR measurement.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub noisy: Multichannel,
    pub clean: Multichannel,
}

pub fn signal_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Convolves the source with every microphone's RIR (truncated to the
/// source length) and adds white Gaussian noise at the scene SNR, measured
/// per channel against the clean convolved signal.
pub fn render_scene(scene: &Scene, config: &RirConfig) -> Result<Rendered, RoomError> {
    scene.room.validate()?;
    scene.array.validate(&scene.room)?;
    scene
        .room
        .require_inside("source", &scene.source_position)?;
    if scene.source_signal.iter().all(|v| *v == 0.0) {
        return Err(RoomError::SilentSource);
    }
    let len = scene.source_signal.len();
    let rirs = simulate_rirs(
        &scene.room,
        &scene.source_position,
        &scene.array.mic_positions,
        config,
    )?;
    let clean: Vec<Vec<f64>> = rirs
        .iter()
        .map(|h| {
            let mut y = fft_convolve(&scene.source_signal, h);
            y.truncate(len);
            y
        })
        .collect();
    let noisy = if scene.snr_db.is_finite() {
        clean
            .iter()
            .enumerate()
            .map(|(m, y)| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(
                    scene.noise_seed,
                    &[m as u64],
                ));
                let mut noise: Vec<f64> =
                    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
                let target = signal_power(y) / 10f64.powf(scene.snr_db / 10.0);
                let gain = (target / signal_power(&noise)).sqrt();
                for v in noise.iter_mut() {
                    *v *= gain;
                }
                y.iter().zip(&noise).map(|(a, b)| a + b).collect()
            })
            .collect()
    } else {
        clean.clone()
    };
    Ok(Rendered {
        noisy: Multichannel { channels: noisy },
        clean: Multichannel { channels: clean },
    })
}

/// Splits a multichannel signal into consecutive non-overlapping windows
/// of `window_len` samples, dropping the trailing remainder.
pub fn window_signal(x: &Multichannel, window_len: usize) -> Result<Vec<Tensor>, RoomError> {
    let len = x.len();
    if window_len == 0 || len < window_len {
        return Err(RoomError::TooShort {
            len,
            window: window_len,
        });
    }
    Ok((0..len / window_len)
        .map(|w| x.to_tensor(w * window_len, window_len))
        .collect())
}

/// Window length in samples for a duration in milliseconds.
pub fn window_samples(window_ms: f64, sample_rate: f64) -> usize {
    (window_ms * sample_rate / 1000.0).round() as usize
}
