use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::{distance, Point, RoomError, RoomSpec};

/// How the uniform wall reflection coefficient is derived from the target T60.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsorptionModel {
    /// `T60 = 24 ln10 V / (c S α)`.
    Sabine,
    /// `T60 = 24 ln10 V / (-c S ln(1 - α))`.
    Eyring,
    /// Reflection coefficient found by bisection so that the Schroeder decay
    /// time of a reference response in the same room hits T60.
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RirConfig {
    /// Fractional-delay filter spans `2 * half_width + 1` taps.
    pub sinc_half_width: usize,
    /// Fractional delays are quantized to `1 / lut_resolution` samples.
    pub lut_resolution: usize,
    pub absorption: AbsorptionModel,
    /// Cap on the total number of wall reflections per image.
    pub max_order: Option<usize>,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self {
            sinc_half_width: 40,
            lut_resolution: 2048,
            absorption: AbsorptionModel::Calibrated,
            max_order: None,
        }
    }
}

/// Uniform pressure reflection coefficient achieving `room.t60`.
pub(crate) fn reflection_coefficient(
    room: &RoomSpec,
    model: AbsorptionModel,
) -> Result<f64, RoomError> {
    if room.t60 == 0.0 {
        return Ok(0.0);
    }
    let k = 24.0 * std::f64::consts::LN_10 * room.volume()
        / (room.speed_of_sound * room.surface() * room.t60);
    let alpha = match model {
        AbsorptionModel::Sabine => k,
        AbsorptionModel::Eyring => 1.0 - (-k).exp(),
        AbsorptionModel::Calibrated => return calibrated_beta(room),
    };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RoomError::UnreachableT60 { t60: room.t60 });
    }
    Ok((1.0 - alpha).sqrt())
}

/// Schroeder decay time of an energy sequence, line fit between -5 and -25 dB.
fn schroeder_decay(energy: &[f64], fs: f64) -> Option<f64> {
    let mut edc = energy.to_vec();
    for i in (0..edc.len().saturating_sub(1)).rev() {
        edc[i] += edc[i + 1];
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if (-25.0..=-5.0).contains(&db) {
            let t = i as f64 / fs;
            n += 1.0;
            sx += t;
            sy += db;
            sxx += t * t;
            sxy += t * db;
        }
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

fn calibrated_beta(room: &RoomSpec) -> Result<f64, RoomError> {
    static CACHE: OnceLock<Mutex<HashMap<[u64; 6], f64>>> = OnceLock::new();
    let key = [
        room.dimensions[0].to_bits(),
        room.dimensions[1].to_bits(),
        room.dimensions[2].to_bits(),
        room.t60.to_bits(),
        room.speed_of_sound.to_bits(),
        room.sample_rate.to_bits(),
    ];
    let cache = CACHE.get_or_init(Default::default);
    if let Some(b) = cache.lock().expect("beta cache lock").get(&key) {
        return Ok(*b);
    }
    // Reference pair placed like a talker facing a wall-mounted array.
    let dims = room.dimensions;
    let src = [0.47 * dims[0], 0.67 * dims[1], 0.52 * dims[2]];
    let rcv = [0.47 * dims[0], 0.85 * dims[1], 0.5 * dims[2]];
    let cfg = RirConfig::default();
    let decay = |beta: f64| -> Result<f64, RoomError> {
        let h = &simulate_with_beta(room, &src, std::slice::from_ref(&rcv), &cfg, beta)?[0];
        let energy: Vec<f64> = h.iter().map(|v| v * v).collect();
        Ok(schroeder_decay(&energy, room.sample_rate).unwrap_or(0.0))
    };
    // Eyring overestimates the lattice decay time, so search downward from it
    // for the first bracket. Very sparse lattices decay irregularly.
    let eyring = reflection_coefficient(room, AbsorptionModel::Eyring)?;
    let mut hi = eyring;
    if decay(hi)? < room.t60 {
        return Err(RoomError::UnreachableT60 { t60: room.t60 });
    }
    let mut lo = hi;
    loop {
        lo -= 0.01;
        if lo <= 0.05 {
            return Err(RoomError::UnreachableT60 { t60: room.t60 });
        }
        if decay(lo)? < room.t60 {
            break;
        }
        hi = lo;
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if decay(mid)? < room.t60 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = 0.5 * (lo + hi);
    cache.lock().expect("beta cache lock").insert(key, beta);
    Ok(beta)
}

/// Windowed-sinc rows: row `r` holds taps for fractional delay `r / res`
/// at offsets `-hw..=hw+1`.
struct SincTable {
    half_width: usize,
    resolution: usize,
    taps: usize,
    rows: Vec<f64>,
}

impl SincTable {
    fn build(half_width: usize, resolution: usize) -> Self {
        let taps = 2 * half_width + 2;
        let span = (2 * half_width + 1) as f64;
        let mut rows = Vec::with_capacity((resolution + 1) * taps);
        for r in 0..=resolution {
            let frac = r as f64 / resolution as f64;
            for j in 0..taps {
                let t = j as f64 - half_width as f64 - frac;
                rows.push(windowed_sinc(t, span));
            }
        }
        Self {
            half_width,
            resolution,
            taps,
            rows,
        }
    }

    fn row(&self, frac: f64) -> &[f64] {
        let r = (frac * self.resolution as f64).round() as usize;
        &self.rows[r * self.taps..(r + 1) * self.taps]
    }
}

/// Hann-windowed sinc evaluated at offset `t`, window length `span` samples.
pub(crate) fn windowed_sinc(t: f64, span: f64) -> f64 {
    if t.abs() >= span / 2.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (2.0 * PI * t / span).cos());
    let sinc = if t == 0.0 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    };
    window * sinc
}

fn table(config: &RirConfig) -> &'static SincTable {
    static TABLES: OnceLock<Mutex<HashMap<(usize, usize), &'static SincTable>>> = OnceLock::new();
    let key = (config.sinc_half_width, config.lut_resolution.max(1));
    let mut tables = TABLES
        .get_or_init(Default::default)
        .lock()
        .expect("table lock");
    tables
        .entry(key)
        .or_insert_with(|| Box::leak(Box::new(SincTable::build(key.0, key.1))))
}

/// RIR length: the decay time plus the latest direct path plus filter tail.
fn rir_len(room: &RoomSpec, source: &Point, mics: &[Point], half_width: usize) -> usize {
    let max_direct = mics.iter().map(|m| distance(source, m)).fold(0.0, f64::max);
    let direct = (max_direct / room.speed_of_sound * room.sample_rate).ceil() as usize;
    (room.t60 * room.sample_rate).ceil() as usize + direct + half_width + 2
}

/// Impulse responses from `source` to each microphone, all the same length.
///
/// Each image contributes `beta^k / (4 pi d)` at delay `d / c` seconds,
/// where `k` counts wall reflections.
pub fn simulate_rirs(
    room: &RoomSpec,
    source: &Point,
    mics: &[Point],
    config: &RirConfig,
) -> Result<Vec<Vec<f64>>, RoomError> {
    room.validate()?;
    room.require_inside("source", source)?;
    for (i, m) in mics.iter().enumerate() {
        room.require_inside(&format!("microphone {i}"), m)?;
    }
    let beta = reflection_coefficient(room, config.absorption)?;
    simulate_with_beta(room, source, mics, config, beta)
}

fn simulate_with_beta(
    room: &RoomSpec,
    source: &Point,
    mics: &[Point],
    config: &RirConfig,
    beta: f64,
) -> Result<Vec<Vec<f64>>, RoomError> {
    let table = table(config);
    let hw = table.half_width as isize;
    let len = rir_len(room, source, mics, table.half_width);
    let fs_over_c = room.sample_rate / room.speed_of_sound;
    let max_dist = (len as f64 + hw as f64) / fs_over_c;

    // Per-axis image coordinates and reflection counts.
    let axis = |k: usize| -> Vec<(f64, usize)> {
        let l = room.dimensions[k];
        let n_max = if beta == 0.0 {
            0
        } else {
            (max_dist / (2.0 * l)).ceil() as i64 + 1
        };
        let mut out = Vec::new();
        for n in -n_max..=n_max {
            for u in 0..2i64 {
                let pos = (1 - 2 * u) as f64 * source[k] + 2.0 * n as f64 * l;
                let refl = ((n - u).abs() + n.abs()) as usize;
                if beta == 0.0 && refl > 0 {
                    continue;
                }
                out.push((pos, refl));
            }
        }
        out
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let max_refl = xs
        .iter()
        .chain(&ys)
        .chain(&zs)
        .map(|a| a.1)
        .max()
        .unwrap_or(0)
        * 3;
    let beta_pow: Vec<f64> = (0..=max_refl).map(|k| beta.powi(k as i32)).collect();

    let mut rirs = vec![vec![0.0; len]; mics.len()];
    let max_d2 = max_dist * max_dist;
    for &(x, rx) in &xs {
        for &(y, ry) in &ys {
            for &(z, rz) in &zs {
                let order = rx + ry + rz;
                if config.max_order.is_some_and(|m| order > m) {
                    continue;
                }
                let gain_base = beta_pow[order];
                if gain_base == 0.0 {
                    continue;
                }
                for (m, h) in mics.iter().zip(rirs.iter_mut()) {
                    let d2 = (x - m[0]).powi(2) + (y - m[1]).powi(2) + (z - m[2]).powi(2);
                    if d2 > max_d2 {
                        continue;
                    }
                    let d = d2.sqrt();
                    let delay = d * fs_over_c;
                    let n0 = delay.floor();
                    let frac = delay - n0;
                    let gain = gain_base / (4.0 * PI * d);
                    let start = n0 as isize - hw;
                    let row = table.row(frac);
                    let lo = (-start).max(0) as usize;
                    let hi = (len as isize - start).clamp(0, row.len() as isize) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let dst =
                        &mut h[(start + lo as isize) as usize..(start + hi as isize) as usize];
                    for (o, c) in dst.iter_mut().zip(&row[lo..hi]) {
                        *o += gain * c;
                    }
                }
            }
        }
    }
    Ok(rirs)
}

pub fn simulate_rir(
    room: &RoomSpec,
    source: &Point,
    mic: &Point,
    config: &RirConfig,
) -> Result<Vec<f64>, RoomError> {
    Ok(simulate_rirs(room, source, std::slice::from_ref(mic), config)?.remove(0))
}
