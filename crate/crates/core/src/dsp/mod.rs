//! STFT, GCC-PHAT time-difference estimation, signal correlation time and
//! anomalous-estimate statistics.

mod fft;
mod gcc;
mod sct;
mod stft;
mod tdoa;

pub use fft::fft_convolve;
pub use gcc::{gcc_phat, GccCurve};
pub use sct::{signal_correlation_time, SctThreshold};
pub use stft::{hann, stft, Spectrogram};
pub use tdoa::{
    center_pairs, evaluate_tdoa, max_lag, true_tdoa, MicPair, SpacingStats, TdoaCase, TdoaConfig,
    TdoaEstimate, TdoaRow, TdoaStats, TdoaTable,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than the required {min}")]
    TooShort { len: usize, min: usize },
    #[error("{0} signal is all zero")]
    Silent(&'static str),
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no microphone pair with spacing {0} m centered on the array")]
    NoPair(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
