use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::DspError;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided short-time spectrum, frames of `nfft / 2 + 1` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub nfft: usize,
    pub hop: usize,
    pub frames: Vec<Vec<Complex64>>,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// `20 log10 |X|`, floored at -200 dB.
    pub fn magnitude_db(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| {
                f.iter()
                    .map(|c| 20.0 * c.norm().max(1e-10).log10())
                    .collect()
            })
            .collect()
    }
}

/// Hann-windowed STFT without padding: `floor((L - nfft) / hop) + 1` frames.
pub fn stft(x: &[f64], nfft: usize, hop: usize) -> Result<Spectrogram, DspError> {
    if nfft == 0 || hop == 0 {
        return Err(DspError::Invalid("nfft and hop must be positive".into()));
    }
    if x.len() < nfft {
        return Err(DspError::TooShort {
            len: x.len(),
            min: nfft,
        });
    }
    let window = hann(nfft);
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let n_frames = (x.len() - nfft) / hop + 1;
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for f in 0..n_frames {
        let seg = &x[f * hop..f * hop + nfft];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..nfft / 2 + 1].to_vec());
    }
    Ok(Spectrogram { nfft, hop, frames })
}
