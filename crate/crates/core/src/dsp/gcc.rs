use rustfft::num_complex::Complex64;

use super::fft::{forward_real, inverse_real};
use super::DspError;

/// Generalized cross-correlation over lags `-max_lag..=max_lag`.
#[derive(Clone, Debug, PartialEq)]
pub struct GccCurve {
    pub max_lag: usize,
    /// `values[i]` belongs to lag `i - max_lag`.
    pub values: Vec<f64>,
    pub peak_lag: i64,
}

impl GccCurve {
    pub fn lags(&self) -> impl Iterator<Item = i64> + '_ {
        let m = self.max_lag as i64;
        -m..=m
    }

    pub fn at(&self, lag: i64) -> Option<f64> {
        let i = lag + self.max_lag as i64;
        (0..self.values.len() as i64)
            .contains(&i)
            .then(|| self.values[i as usize])
    }
}

/// GCC-PHAT. If `x2` is `x1` delayed by `d` samples the peak is at `+d`.
pub fn gcc_phat(x1: &[f64], x2: &[f64], max_lag: usize) -> Result<GccCurve, DspError> {
    if x1.len() != x2.len() {
        return Err(DspError::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.len() < 2 * max_lag || x1.is_empty() {
        return Err(DspError::TooShort {
            len: x1.len(),
            min: (2 * max_lag).max(1),
        });
    }
    if x1.iter().all(|v| *v == 0.0) {
        return Err(DspError::Silent("first"));
    }
    if x2.iter().all(|v| *v == 0.0) {
        return Err(DspError::Silent("second"));
    }
    let n = (x1.len() + max_lag).next_power_of_two();
    let a = forward_real(x1, n);
    let b = forward_real(x2, n);
    let cross: Vec<Complex64> = a.iter().zip(&b).map(|(p, q)| p.conj() * q).collect();
    let peak = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let delta = 1e-12 * peak;
    let white = cross.into_iter().map(|c| c / (c.norm() + delta)).collect();
    let r = inverse_real(white);
    let m = max_lag as i64;
    let values: Vec<f64> = (-m..=m)
        .map(|l| r[l.rem_euclid(n as i64) as usize])
        .collect();
    let peak_idx = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best });
    Ok(GccCurve {
        max_lag,
        peak_lag: peak_idx as i64 - m,
        values,
    })
}
