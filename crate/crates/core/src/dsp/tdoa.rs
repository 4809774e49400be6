use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{gcc_phat, DspError};
use crate::nn::Tensor;
use crate::room::{distance, ArrayGeometry, Point};

/// Two microphones, `first` before `second` along the array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicPair {
    pub spacing: f64,
    pub first: usize,
    pub second: usize,
}

/// Pairs symmetric about the array midpoint, one per requested spacing.
pub fn center_pairs(array: &ArrayGeometry, spacings: &[f64]) -> Result<Vec<MicPair>, DspError> {
    let center = array.center();
    let mics = &array.mic_positions;
    spacings
        .iter()
        .map(|&spacing| {
            for i in 0..mics.len() {
                for j in i + 1..mics.len() {
                    let mid = [0, 1, 2].map(|k| 0.5 * (mics[i][k] + mics[j][k]));
                    if (distance(&mics[i], &mics[j]) - spacing).abs() < 1e-6
                        && distance(&mid, &center) < 1e-6
                    {
                        return Ok(MicPair {
                            spacing,
                            first: i,
                            second: j,
                        });
                    }
                }
            }
            Err(DspError::NoPair(spacing))
        })
        .collect()
}

/// Direct-path delay of `second` relative to `first`, in samples.
pub fn true_tdoa(
    source: &Point,
    first: &Point,
    second: &Point,
    speed_of_sound: f64,
    sample_rate: f64,
) -> f64 {
    (distance(source, second) - distance(source, first)) / speed_of_sound * sample_rate
}

/// Largest physically possible lag plus a safety margin.
pub fn max_lag(spacing: f64, speed_of_sound: f64, sample_rate: f64, margin: usize) -> usize {
    (spacing / speed_of_sound * sample_rate).ceil() as usize + margin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdoaConfig {
    pub spacings: Vec<f64>,
    pub lag_margin: usize,
    /// Estimate once per source on the concatenated windows.
    pub concat: bool,
}

impl Default for TdoaConfig {
    fn default() -> Self {
        Self {
            spacings: vec![0.15, 0.45, 0.75],
            lag_margin: 4,
            concat: false,
        }
    }
}

/// One source: its position, the SCT of its clean recording and its
/// `(samples, channels)` windows.
pub struct TdoaCase<'a> {
    pub source: Point,
    pub sct: f64,
    pub windows: Vec<&'a Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdoaEstimate {
    pub case: usize,
    /// `None` when estimated on the concatenated signal.
    pub window: Option<usize>,
    pub estimate: i64,
    pub truth: f64,
    pub sct: f64,
    pub anomalous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingStats {
    pub pair: MicPair,
    pub max_lag: usize,
    pub estimates: Vec<TdoaEstimate>,
}

impl SpacingStats {
    /// Fraction of anomalous estimates.
    pub fn p_a(&self) -> f64 {
        if self.estimates.is_empty() {
            return 0.0;
        }
        self.estimates.iter().filter(|e| e.anomalous).count() as f64 / self.estimates.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdoaStats {
    pub spacings: Vec<SpacingStats>,
}

fn channel(t: &Tensor, m: usize) -> Result<Vec<f64>, DspError> {
    let &[_, n_ch] = t.shape() else {
        return Err(DspError::Invalid(format!(
            "expected (samples, channels), got {:?}",
            t.shape()
        )));
    };
    if m >= n_ch {
        return Err(DspError::Invalid(format!("channel {m} out of {n_ch}")));
    }
    Ok(t.data().iter().skip(m).step_by(n_ch).copied().collect())
}

/// GCC-PHAT peak picking on the centered pairs. An estimate is anomalous
/// when it misses the geometric delay by more than half the SCT.
pub fn evaluate_tdoa(
    cases: &[TdoaCase],
    array: &ArrayGeometry,
    speed_of_sound: f64,
    sample_rate: f64,
    config: &TdoaConfig,
) -> Result<TdoaStats, DspError> {
    let pairs = center_pairs(array, &config.spacings)?;
    let mics = &array.mic_positions;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let lag = max_lag(pair.spacing, speed_of_sound, sample_rate, config.lag_margin);
        let mut estimates = Vec::new();
        for (ci, case) in cases.iter().enumerate() {
            let truth = true_tdoa(
                &case.source,
                &mics[pair.first],
                &mics[pair.second],
                speed_of_sound,
                sample_rate,
            );
            let mut push = |window: Option<usize>, a: &[f64], b: &[f64]| -> Result<(), DspError> {
                let est = gcc_phat(a, b, lag)?.peak_lag;
                estimates.push(TdoaEstimate {
                    case: ci,
                    window,
                    estimate: est,
                    truth,
                    sct: case.sct,
                    anomalous: (est as f64 - truth).abs() > case.sct / 2.0,
                });
                Ok(())
            };
            if config.concat {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for w in &case.windows {
                    a.extend(channel(w, pair.first)?);
                    b.extend(channel(w, pair.second)?);
                }
                push(None, &a, &b)?;
            } else {
                for (wi, w) in case.windows.iter().enumerate() {
                    push(
                        Some(wi),
                        &channel(w, pair.first)?,
                        &channel(w, pair.second)?,
                    )?;
                }
            }
        }
        out.push(SpacingStats {
            pair,
            max_lag: lag,
            estimates,
        });
    }
    Ok(TdoaStats { spacings: out })
}

/// P_a in percent laid out with one row per (SNR, T60) condition and one
/// column per (spacing, signal).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TdoaTable {
    pub spacings: Vec<f64>,
    pub signals: Vec<String>,
    pub rows: Vec<TdoaRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdoaRow {
    pub snr_db: f64,
    pub t60: f64,
    /// Indexed `[spacing][signal]`.
    pub p_a_percent: Vec<Vec<Option<f64>>>,
}

impl TdoaTable {
    pub fn new(spacings: Vec<f64>, signals: Vec<String>) -> Self {
        Self {
            spacings,
            signals,
            rows: Vec::new(),
        }
    }

    pub fn insert(
        &mut self,
        snr_db: f64,
        t60: f64,
        signal: &str,
        stats: &TdoaStats,
    ) -> Result<(), DspError> {
        let si = self
            .signals
            .iter()
            .position(|s| s == signal)
            .ok_or_else(|| DspError::Invalid(format!("unknown signal column {signal}")))?;
        let ri = match self
            .rows
            .iter()
            .position(|r| r.snr_db == snr_db && r.t60 == t60)
        {
            Some(i) => i,
            None => {
                self.rows.push(TdoaRow {
                    snr_db,
                    t60,
                    p_a_percent: vec![vec![None; self.signals.len()]; self.spacings.len()],
                });
                self.rows.len() - 1
            }
        };
        for s in &stats.spacings {
            let di = self
                .spacings
                .iter()
                .position(|d| (d - s.pair.spacing).abs() < 1e-9)
                .ok_or_else(|| DspError::Invalid(format!("unknown spacing {}", s.pair.spacing)))?;
            self.rows[ri].p_a_percent[di][si] = Some(100.0 * s.p_a());
        }
        Ok(())
    }

    pub fn get(&self, snr_db: f64, t60: f64, spacing: f64, signal: &str) -> Option<f64> {
        let row = self
            .rows
            .iter()
            .find(|r| r.snr_db == snr_db && r.t60 == t60)?;
        let di = self
            .spacings
            .iter()
            .position(|d| (d - spacing).abs() < 1e-9)?;
        let si = self.signals.iter().position(|s| s == signal)?;
        row.p_a_percent[di][si]
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["snr_db".to_string(), "t60_s".to_string()];
        for d in &self.spacings {
            for s in &self.signals {
                h.push(format!("d{d}_{s}"));
            }
        }
        h
    }

    /// Rows sorted by decreasing SNR then increasing T60; empty cells for
    /// missing entries.
    pub fn write_csv(&self, path: &Path) -> Result<(), DspError> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| b.snr_db.total_cmp(&a.snr_db).then(a.t60.total_cmp(&b.t60)));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for r in &rows {
            let mut rec = vec![r.snr_db.to_string(), r.t60.to_string()];
            for cells in &r.p_a_percent {
                rec.extend(
                    cells
                        .iter()
                        .map(|c| c.map(|v| format!("{v:.2}")).unwrap_or_default()),
                );
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
