use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Strategy;

/// Number of samples zeroed out of `n` at `fraction`. A tiny tolerance
/// keeps decimal fractions such as 0.3 from rounding up an extra sample.
pub fn mask_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Indices sorted by descending key, ties to the lower index.
fn ranking(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

/// Copy of `window` (flattened `(samples, mics)`) with the first
/// `ceil(fraction * len)` samples of the strategy's ranking set to zero.
///
/// `relevance` is required for [`Strategy::Lrp`]; `seed` drives the
/// uniform permutation of [`Strategy::Random`]. With `per_channel`, each
/// microphone column is ranked and masked on its own.
pub fn manipulate_window(
    window: &[f64],
    n_mics: usize,
    strategy: Strategy,
    fraction: f64,
    relevance: Option<&[f64]>,
    seed: u64,
    per_channel: bool,
) -> Vec<f64> {
    let mut out = window.to_vec();
    if fraction <= 0.0 {
        return out;
    }
    let groups: Vec<Vec<usize>> = if per_channel {
        (0..n_mics)
            .map(|m| (m..window.len()).step_by(n_mics).collect())
            .collect()
    } else {
        vec![(0..window.len()).collect()]
    };
    for (g, members) in groups.iter().enumerate() {
        let order: Vec<usize> = match strategy {
            Strategy::Random => {
                let mut p = members.clone();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(
                    seed,
                    &[g as u64],
                )));
                p
            }
            Strategy::Amplitude => {
                let keys: Vec<f64> = members.iter().map(|&i| window[i].abs()).collect();
                ranking(&keys).into_iter().map(|k| members[k]).collect()
            }
            Strategy::Lrp => {
                let r = relevance.expect("relevance is required for the LRP strategy");
                let keys: Vec<f64> = members.iter().map(|&i| r[i]).collect();
                ranking(&keys).into_iter().map(|k| members[k]).collect()
            }
        };
        for &i in &order[..mask_count(fraction, members.len())] {
            out[i] = 0.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCurve {
    pub strategy: Strategy,
    /// MAE per fraction, averaged uniformly over conditions.
    pub mae: Vec<f64>,
    /// `per_condition[c][f]`.
    pub per_condition: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationResult {
    pub model: String,
    pub fractions: Vec<f64>,
    pub conditions: Vec<String>,
    pub curves: Vec<ManipulationCurve>,
}

impl ManipulationResult {
    pub fn curve(&self, strategy: Strategy) -> Option<&ManipulationCurve> {
        self.curves.iter().find(|c| c.strategy == strategy)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "strategy".to_string(),
            "fraction".to_string(),
            "mae_m".to_string(),
        ];
        header.extend(self.conditions.iter().map(|c| format!("mae_m_{c}")));
        w.write_record(&header)?;
        for c in &self.curves {
            for (fi, f) in self.fractions.iter().enumerate() {
                let mut row = vec![
                    c.strategy.name().to_string(),
                    format!("{f:.2}"),
                    format!("{:.6}", c.mae[fi]),
                ];
                row.extend(c.per_condition.iter().map(|p| format!("{:.6}", p[fi])));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
