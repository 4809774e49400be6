//! Relevance signals and their file formats.
//!
//! Tensor files are little-endian: magic `SLRV`, `u32` version, `u32` rank,
//! `rank` x `u64` dims, the `f64` values, then a SHA-256 of everything before.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::LrpError;
use crate::nn::Tensor;

const MAGIC: &[u8; 4] = b"SLRV";
const VERSION: u32 = 1;

/// Concatenates per-window `(samples, channels)` relevance into one series
/// per channel. Windows are given with their index and must cover `0..n`.
pub fn relevance_signal(windows: &[(usize, &Tensor)]) -> Result<Vec<Vec<f64>>, LrpError> {
    let Some((_, first)) = windows.first() else {
        return Err(LrpError::Windows("no windows".into()));
    };
    let &[len, channels] = first.shape() else {
        return Err(LrpError::Windows(format!(
            "expected (samples, channels), got {:?}",
            first.shape()
        )));
    };
    let mut order: Vec<&(usize, &Tensor)> = windows.iter().collect();
    order.sort_by_key(|w| w.0);
    for (expected, (i, t)) in order.iter().enumerate() {
        if *i != expected {
            return Err(LrpError::Windows(format!(
                "window indices are not 0..{}",
                windows.len()
            )));
        }
        if t.shape() != first.shape() {
            return Err(LrpError::Windows(format!(
                "window {i} has shape {:?}",
                t.shape()
            )));
        }
    }
    let mut out = vec![Vec::with_capacity(len * windows.len()); channels];
    for (_, t) in order {
        for frame in t.data().chunks(channels) {
            for (ch, v) in out.iter_mut().zip(frame) {
                ch.push(*v);
            }
        }
    }
    Ok(out)
}

pub fn write_relevance(path: &Path, t: &Tensor) -> Result<(), LrpError> {
    let mut buf = Vec::with_capacity(16 + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_relevance(path: &Path) -> Result<Tensor, LrpError> {
    let buf = std::fs::read(path)?;
    let corrupt = |m: &str| LrpError::Corrupt(m.to_string());
    if buf.len() < 12 + 32 || &buf[..4] != MAGIC {
        return Err(corrupt("bad header"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let rank = u32_at(8) as usize;
    let mut pos = 12;
    if body.len() < pos + 8 * rank {
        return Err(corrupt("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            u64::from_le_bytes(
                body[pos + 8 * i..pos + 8 * i + 8]
                    .try_into()
                    .expect("8 bytes"),
            ) as usize
        })
        .collect();
    pos += 8 * rank;
    let n: usize = shape.iter().product();
    if body.len() != pos + 8 * n {
        return Err(corrupt("payload length does not match shape"));
    }
    let data = body[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| LrpError::Corrupt(e.to_string()))
}

/// Multichannel 32-bit float WAV scaled so the largest magnitude is 1.
pub fn write_relevance_wav(
    path: &Path,
    channels: &[Vec<f64>],
    sample_rate: u32,
) -> Result<(), LrpError> {
    let len = channels.first().map(Vec::len).unwrap_or(0);
    if channels.is_empty() || channels.iter().any(|c| c.len() != len) {
        return Err(LrpError::Windows(
            "channels must be non-empty and equally long".into(),
        ));
    }
    let peak = channels
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for n in 0..len {
        for c in channels {
            w.write_sample((c[n] * scale) as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}
