use sha2::{Digest, Sha256};

/// Derives an independent sub-seed from a base seed and a path of indices.
///
/// Used so that every scene, epoch, and example draws from its own stream,
/// making parallel and serial generation agree.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
