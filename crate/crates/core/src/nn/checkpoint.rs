//! Versioned little-endian checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "SLCK"
//! version      u32      CHECKPOINT_VERSION
//! fingerprint  32 bytes SHA-256 of the architecture description
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON
//! n_tensors    u32
//! n_tensors × { name_len u32, name bytes, len u64, len × f64 }
//! checksum     32 bytes SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LayerGraph, NnError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SLCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint);
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum: [u8; 32] = Sha256::digest(&buf).into();
        buf.extend_from_slice(&sum);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| NnError::Corrupt(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| NnError::Corrupt(e.to_string()))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or(NnError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, data));
        }
        let body_end = r.pos;
        let sum = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(NnError::Corrupt("trailing bytes after checksum".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != sum {
            return Err(NnError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            fingerprint,
            meta,
            tensors,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<(), NnError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).ok_or(NnError::Truncated)?;
        if end > self.bytes.len() {
            return Err(NnError::Truncated);
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Saves the graph's parameters with its fingerprint and `meta`.
///
/// The per-layer initialization scheme and architecture tag are always
/// recorded in the metadata.
pub fn save_weights(
    graph: &LayerGraph,
    path: &Path,
    meta: serde_json::Value,
) -> Result<(), NnError> {
    let init: serde_json::Map<String, serde_json::Value> = graph
        .nodes()
        .iter()
        .filter(|n| n.kind.has_params())
        .map(|n| {
            (
                n.id.clone(),
                serde_json::to_value(n.init).expect("init serializes"),
            )
        })
        .collect();
    let meta = serde_json::json!({
        "kind": "weights",
        "arch_tag": graph.arch_tag(),
        "init": init,
        "user": meta,
    });
    let tensors = graph
        .param_names()
        .into_iter()
        .zip(graph.params())
        .map(|(n, p)| (n, p.to_vec()))
        .collect();
    Checkpoint {
        fingerprint: graph.fingerprint(),
        meta,
        tensors,
    }
    .write(path)
}

/// Loads parameters saved by [`save_weights`]. Nothing is modified unless
/// the whole file validates.
pub fn load_weights(graph: &mut LayerGraph, path: &Path) -> Result<serde_json::Value, NnError> {
    let ck = Checkpoint::read(path)?;
    if ck.fingerprint != graph.fingerprint() {
        return Err(NnError::FingerprintMismatch);
    }
    let names = graph.param_names();
    let lens: Vec<usize> = graph.params().iter().map(|p| p.len()).collect();
    let mut staged = Vec::with_capacity(names.len());
    for (name, len) in names.iter().zip(lens) {
        let t = ck
            .tensor(name)
            .ok_or_else(|| NnError::Corrupt(format!("missing tensor `{name}`")))?;
        if t.len() != len {
            return Err(NnError::Corrupt(format!(
                "tensor `{name}` has {} values, expected {len}",
                t.len()
            )));
        }
        staged.push(t.to_vec());
    }
    for (p, w) in graph.params_mut().into_iter().zip(staged) {
        *p = w;
    }
    Ok(ck.meta)
}
