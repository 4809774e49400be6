use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::room::{ArrayGeometry, Point, RoomSpec};
use crate::seed::derive_seed;

const STREAM_Z: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_KEEP: u64 = 3;

/// A rectangular x-y source region on one side of the array, with a
/// separate, smaller test grid centered in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Lower x-y corner of the training region.
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    /// Keep a seeded subset of exactly this many grid points.
    pub keep: Option<usize>,
    pub z_range: [f64; 2],
    pub val_fraction: f64,
    pub test_nx: usize,
    pub test_ny: usize,
    pub test_extent: [f64; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            origin: [0.825, 4.5],
            extent: [1.75, 2.0],
            nx: 10,
            ny: 10,
            keep: None,
            z_range: [1.0, 1.5],
            val_fraction: 0.2,
            test_nx: 4,
            test_ny: 4,
            test_extent: [1.5, 1.5],
        }
    }
}

impl GridConfig {
    /// 60 x 66 lattice thinned to 3940 points, 16 x 18 test points.
    pub fn full() -> Self {
        Self {
            nx: 60,
            ny: 66,
            keep: Some(3940),
            test_nx: 16,
            test_ny: 18,
            test_extent: [0.5, 0.5],
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePoint {
    pub id: usize,
    pub split: Split,
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceGrid {
    pub sources: Vec<SourcePoint>,
}

impl SourceGrid {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SourcePoint> {
        self.sources.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn axis(lo: f64, extent: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo + extent / 2.0];
    }
    (0..n)
        .map(|i| lo + extent * i as f64 / (n - 1) as f64)
        .collect()
}

/// Source positions for all splits. Train and validation share the main
/// lattice (split by a seeded permutation); test points form their own
/// lattice centered in the region. Heights are drawn uniformly per source.
pub fn generate_grid(
    config: &GridConfig,
    room: &RoomSpec,
    array: &ArrayGeometry,
    seed: u64,
) -> Result<SourceGrid, DataError> {
    if config.nx == 0 || config.ny == 0 || config.keep == Some(0) {
        return Err(DataError::ZeroSources(format!(
            "{} x {} lattice",
            config.nx, config.ny
        )));
    }
    let [z0, z1] = config.z_range;
    if !(z0 <= z1)
        || config
            .extent
            .iter()
            .chain(&config.test_extent)
            .any(|e| !(*e >= 0.0))
    {
        return Err(DataError::Grid(
            "extents must be non-negative and z_range ordered".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(DataError::Grid(format!(
            "val_fraction {} must lie in [0, 1)",
            config.val_fraction
        )));
    }

    let xs = axis(config.origin[0], config.extent[0], config.nx);
    let ys = axis(config.origin[1], config.extent[1], config.ny);
    let mut main: Vec<[f64; 2]> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect();
    if let Some(k) = config.keep {
        if k > main.len() {
            return Err(DataError::Grid(format!(
                "keep = {k} exceeds {} lattice points",
                main.len()
            )));
        }
        let mut idx: Vec<usize> = (0..main.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[STREAM_KEEP],
        )));
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        main = chosen.into_iter().map(|i| main[i]).collect();
    }
    let n_val = (main.len() as f64 * config.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..main.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[STREAM_SPLIT],
    )));
    let mut is_val = vec![false; main.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }

    let center = [
        config.origin[0] + config.extent[0] / 2.0,
        config.origin[1] + config.extent[1] / 2.0,
    ];
    let tx = axis(
        center[0] - config.test_extent[0] / 2.0,
        config.test_extent[0],
        config.test_nx,
    );
    let ty = axis(
        center[1] - config.test_extent[1] / 2.0,
        config.test_extent[1],
        config.test_ny,
    );
    let test: Vec<[f64; 2]> = if config.test_nx == 0 || config.test_ny == 0 {
        Vec::new()
    } else {
        ty.iter()
            .flat_map(|&y| tx.iter().map(move |&x| [x, y]))
            .collect()
    };

    let labelled = main
        .iter()
        .zip(&is_val)
        .map(|(p, v)| (*p, if *v { Split::Val } else { Split::Train }))
        .chain(test.iter().map(|p| (*p, Split::Test)));
    let mut sources = Vec::new();
    for (id, (xy, split)) in labelled.enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_Z, split.code(), id as u64]));
        let z = if z1 > z0 {
            rng.random_range(z0..=z1)
        } else {
            z0
        };
        let position = [xy[0], xy[1], z];
        if !room.contains(&position) {
            return Err(DataError::Grid(format!(
                "source {id} at {position:?} is outside the room"
            )));
        }
        if on_array_line(array, &position) {
            return Err(DataError::Grid(format!(
                "source {id} at {position:?} lies on the array line"
            )));
        }
        sources.push(SourcePoint {
            id,
            split,
            position,
        });
    }
    Ok(SourceGrid { sources })
}

/// Within 1 cm of the segment joining the outermost microphones.
fn on_array_line(array: &ArrayGeometry, p: &Point) -> bool {
    let (Some(a), Some(b)) = (array.mic_positions.first(), array.mic_positions.last()) else {
        return false;
    };
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d2: f64 = (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum();
    d2 < 1e-4
}
