//! On-disk cache of rendered scenes.
//!
//! Entry layout (little-endian): magic `SLSC`, `u32` version, `u32`
//! channel count, `u64` samples per channel, channel-major `f64` samples,
//! then a 32-byte SHA-256 of everything before it. Entries are named by the
//! hex SHA-256 of the scene description, so any change to the room,
//! positions, seed, T60 or SNR selects a different file.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Multichannel, RirConfig, RoomError, Scene};

const MAGIC: &[u8; 4] = b"SLSC";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct SceneCache {
    dir: PathBuf,
}

impl SceneCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, RoomError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(scene: &Scene, config: &RirConfig) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "{:?}|{:?}|{:?}|{}|{}|{:?}|",
            scene.room,
            scene.array.mic_positions,
            scene.source_position,
            scene.snr_db,
            scene.noise_seed,
            config
        ));
        for v in &scene.source_signal {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.scene"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Multichannel>, RoomError> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        decode(&fs::read(path)?).map(Some)
    }

    pub fn put(&self, key: &str, signal: &Multichannel) -> Result<(), RoomError> {
        write_atomic(&self.path(key), &encode(signal))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RoomError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn encode(signal: &Multichannel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + signal.n_channels() * signal.len() * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(signal.n_channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(signal.len() as u64).to_le_bytes());
    for ch in &signal.channels {
        for v in ch {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&sum);
    buf
}

fn decode(bytes: &[u8]) -> Result<Multichannel, RoomError> {
    let bad = |m: &str| RoomError::Cache(m.to_string());
    if bytes.len() < 52 || &bytes[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad("unsupported version"));
    }
    let n_ch = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20 + n_ch * len * 8;
    if bytes.len() != body + 32 {
        return Err(bad("length mismatch"));
    }
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(bad("checksum mismatch"));
    }
    let channels = bytes[20..body]
        .chunks_exact(len * 8)
        .map(|c| {
            c.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        })
        .collect();
    Ok(Multichannel { channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SceneCache::new(dir.path()).unwrap();
        let sig = Multichannel {
            channels: vec![vec![1.0, -2.5, 3.25], vec![0.0, 1e-300, -7.0]],
        };
        cache.put("abc", &sig).unwrap();
        assert_eq!(cache.get("abc").unwrap(), Some(sig));
        assert_eq!(cache.get("missing").unwrap(), None);

        let path = dir.path().join("abc.scene");
        let mut bytes = fs::read(&path).unwrap();
        bytes[25] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(cache.get("abc").is_err());
    }
}
