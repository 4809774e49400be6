use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rubato::{FftFixedInOut, Resampler};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Sampling rate of every recording handed to the simulator.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub name: String,
    pub samples: Vec<f64>,
}

/// Reads every `*.wav` in `dir` (sorted by file name), downmixes to mono
/// and resamples to 16 kHz. Integer samples are scaled by `2^(bits-1)`.
pub fn ingest_speech(dir: &Path) -> Result<Vec<Recording>, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::NoRecordings(dir.to_path_buf()));
    }
    paths.iter().map(|p| read_recording(p)).collect()
}

fn read_recording(path: &Path) -> Result<Recording, DataError> {
    let wav_err = |source| DataError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono: Vec<f64> = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(ch)
            .map(|f| f.iter().sum::<f64>() / ch as f64)
            .collect()
    };
    let name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    if mono.iter().all(|v| *v == 0.0) {
        return Err(DataError::SilentRecording(name));
    }
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)?
    };
    Ok(Recording { name, samples })
}

/// Band-limited rate conversion of a whole signal. The output has
/// `round(len * to / from)` samples and is aligned with the input.
pub fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>, DataError> {
    if from == to {
        return Ok(x.to_vec());
    }
    let err = |e: &dyn std::fmt::Display| DataError::Resample(e.to_string());
    let mut r =
        FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1).map_err(|e| err(&e))?;
    let want = (x.len() as f64 * to as f64 / from as f64).round() as usize;
    let delay = r.output_delay();
    let mut out = Vec::with_capacity(want + delay + 2048);
    let mut pos = 0;
    while out.len() < want + delay {
        let need = r.input_frames_next();
        let produced = if pos + need <= x.len() {
            let chunk = [&x[pos..pos + need]];
            pos += need;
            r.process(&chunk, None).map_err(|e| err(&e))?
        } else if pos < x.len() {
            let chunk = [&x[pos..]];
            pos = x.len();
            r.process_partial(Some(&chunk), None).map_err(|e| err(&e))?
        } else {
            r.process_partial::<&[f64]>(None, None)
                .map_err(|e| err(&e))?
        };
        out.extend_from_slice(&produced[0]);
    }
    Ok(out[delay..delay + want].to_vec())
}

/// Speech-like test signal: bursts of formant-filtered noise separated by
/// silent pauses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub duration_s: f64,
    pub burst_ms: [f64; 2],
    pub pause_ms: [f64; 2],
    /// Every pause is at least `r / (1 - r)` times the preceding burst, so
    /// silence makes up at least this fraction of the signal.
    pub min_pause_fraction: f64,
    /// Raised-cosine onset and offset ramps of each burst.
    pub ramp_ms: f64,
    pub formants: usize,
    pub formant_hz: [f64; 2],
    /// Peak amplitude after normalization.
    pub peak: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            duration_s: 0.96,
            burst_ms: [60.0, 220.0],
            pause_ms: [40.0, 160.0],
            min_pause_fraction: 0.35,
            ramp_ms: 8.0,
            formants: 3,
            formant_hz: [250.0, 3500.0],
            peak: 0.5,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !(self.duration_s > 0.0) || !ordered(self.burst_ms) || !ordered(self.pause_ms) {
            return Err(DataError::Config(
                "surrogate durations must be positive and ordered".into(),
            ));
        }
        if !(0.0..0.95).contains(&self.min_pause_fraction) || !ordered(self.formant_hz) {
            return Err(DataError::Config(
                "surrogate pause fraction or formant range invalid".into(),
            ));
        }
        if self.formant_hz[1] >= SAMPLE_RATE as f64 / 2.0
            || !(self.peak > 0.0)
            || self.ramp_ms < 0.0
        {
            return Err(DataError::Config(
                "surrogate formants, peak or ramp out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Two-pole resonator with unit peak gain at `freq`.
struct Resonator {
    a1: f64,
    a2: f64,
    g: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let r = (-PI * bandwidth / fs).exp();
        let w = 2.0 * PI * freq / fs;
        Self {
            a1: 2.0 * r * w.cos(),
            a2: -r * r,
            g: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.g * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Deterministic surrogate recording for `seed`.
pub fn surrogate_speech(config: &SurrogateConfig, seed: u64) -> Result<Vec<f64>, DataError> {
    config.validate()?;
    let fs = SAMPLE_RATE as f64;
    let ms = |v: f64| (v * fs / 1000.0).round() as usize;
    let len = (config.duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let ratio = config.min_pause_fraction / (1.0 - config.min_pause_fraction);
    let ramp = ms(config.ramp_ms);

    let mut pos = ms(rng.random_range(config.pause_ms[0]..=config.pause_ms[1])) / 2;
    loop {
        let burst = ms(rng.random_range(config.burst_ms[0]..=config.burst_ms[1]));
        let min_pause = (burst as f64 * ratio).ceil() as usize;
        if pos + burst + min_pause > len {
            break;
        }
        let mut bank: Vec<Resonator> = (0..config.formants)
            .map(|_| {
                let f = rng.random_range(config.formant_hz[0]..=config.formant_hz[1]);
                Resonator::new(f, 0.15 * f + 60.0, fs)
            })
            .collect();
        let gains: Vec<f64> = (0..config.formants)
            .map(|_| rng.random_range(0.3..1.0))
            .collect();
        let level = rng.random_range(0.4..1.0);
        for n in 0..burst {
            let e: f64 = StandardNormal.sample(&mut rng);
            let mut v = 0.1 * e;
            for (r, g) in bank.iter_mut().zip(&gains) {
                v += g * r.step(e);
            }
            let edge = n.min(burst - 1 - n);
            let env = if edge < ramp {
                0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            out[pos + n] = level * env * v;
        }
        let pause = ms(rng.random_range(config.pause_ms[0]..=config.pause_ms[1])).max(min_pause);
        pos += burst + pause;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(DataError::Config(format!(
            "surrogate of {} s holds no complete burst",
            config.duration_s
        )));
    }
    out.iter_mut().for_each(|v| *v *= config.peak / peak);
    Ok(out)
}
