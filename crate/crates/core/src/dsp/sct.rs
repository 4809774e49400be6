use serde::{Deserialize, Serialize};

use super::fft::{forward_real, inverse_real};
use super::DspError;

/// Level, relative to the lag-0 autocorrelation, bounding the main lobe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SctThreshold {
    /// -3 dB read as an amplitude ratio, `10^(-3/20)`.
    #[default]
    Amplitude,
    /// -3 dB read as a power ratio, 0.5.
    Power,
}

impl SctThreshold {
    pub fn level(self) -> f64 {
        match self {
            Self::Amplitude => 10f64.powf(-3.0 / 20.0),
            Self::Power => 0.5,
        }
    }
}

/// Width in samples of the autocorrelation main lobe above the threshold,
/// with linear interpolation of the crossing.
pub fn signal_correlation_time(s: &[f64], threshold: SctThreshold) -> Result<f64, DspError> {
    if s.iter().all(|v| *v == 0.0) {
        return Err(DspError::Silent("source"));
    }
    let n = (2 * s.len()).next_power_of_two();
    let spec = forward_real(s, n);
    let power = spec
        .iter()
        .map(|c| rustfft::num_complex::Complex64::new(c.norm_sqr(), 0.0))
        .collect();
    let r = inverse_real(power);
    let level = threshold.level();
    let r0 = r[0];
    for lag in 1..s.len() {
        let cur = r[lag] / r0;
        if cur < level {
            let prev = r[lag - 1] / r0;
            let crossing = (lag - 1) as f64 + (prev - level) / (prev - cur);
            return Ok(2.0 * crossing);
        }
    }
    Ok(2.0 * s.len() as f64)
}
