//! Binary container for windowed examples.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic       4 bytes "SLEX"
//! version     u32
//! window_len  u32
//! n_mics      u32
//! count       u64
//! count × { condition u32, source u32, window u32, target 3 × f64,
//!           window_len × n_mics f32 in (sample, mic) order }
//! checksum    32 bytes SHA-256 of every preceding byte
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::nn::{Example, Samples, Tensor};

const MAGIC: &[u8; 4] = b"SLEX";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const KEY_LEN: u64 = 12 + 24;

/// Identifies one window: condition index, source id, window index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleKey {
    pub condition: usize,
    pub source: usize,
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub window_len: usize,
    pub n_mics: usize,
    pub count: usize,
}

impl StoreHeader {
    fn record_len(&self) -> u64 {
        KEY_LEN + 4 * (self.window_len * self.n_mics) as u64
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct StoreWriter {
    out: BufWriter<File>,
    hash: Sha256,
    header: StoreHeader,
    written: usize,
    tmp: PathBuf,
    path: PathBuf,
}

impl StoreWriter {
    pub(crate) fn create(path: &Path, header: StoreHeader) -> Result<Self, DataError> {
        let tmp = path.with_extension("tmp");
        let mut w = Self {
            out: BufWriter::new(File::create(&tmp)?),
            hash: Sha256::new(),
            header,
            written: 0,
            tmp,
            path: path.to_path_buf(),
        };
        let mut buf = Vec::with_capacity(HEADER_LEN as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.window_len as u32).to_le_bytes());
        buf.extend_from_slice(&(header.n_mics as u32).to_le_bytes());
        buf.extend_from_slice(&(header.count as u64).to_le_bytes());
        w.put(&buf)?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<(), DataError> {
        self.hash.update(bytes);
        self.out.write_all(bytes)?;
        Ok(())
    }

    pub(crate) fn push(
        &mut self,
        key: ExampleKey,
        target: &[f64; 3],
        window: &Tensor,
    ) -> Result<(), DataError> {
        if window.shape() != [self.header.window_len, self.header.n_mics] {
            return Err(DataError::Mismatch(format!(
                "window shape {:?}",
                window.shape()
            )));
        }
        let mut buf = Vec::with_capacity(self.header.record_len() as usize);
        for v in [key.condition, key.source, key.window] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in target {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in window.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.put(&buf)?;
        self.written += 1;
        Ok(())
    }

    /// Writes the checksum, renames into place and returns the hex digest.
    pub(crate) fn finish(mut self) -> Result<String, DataError> {
        if self.written != self.header.count {
            return Err(DataError::Mismatch(format!(
                "wrote {} examples, header declares {}",
                self.written, self.header.count
            )));
        }
        let sum = self.hash.finalize_reset();
        self.out.write_all(&sum)?;
        self.out.flush()?;
        drop(self.out);
        fs::rename(&self.tmp, &self.path)?;
        Ok(hex(&sum))
    }
}

/// A validated example store on disk. Opening reads the keys and targets;
/// window data is loaded on request.
#[derive(Clone, Debug)]
pub struct ExampleStore {
    path: PathBuf,
    header: StoreHeader,
    keys: Vec<ExampleKey>,
    targets: Vec<[f64; 3]>,
    checksum: String,
}

impl ExampleStore {
    /// Validates length and checksum of the whole file.
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path)?;
        let size = file.metadata()?.len();
        let mut r = BufReader::with_capacity(1 << 20, file);
        let mut hash = Sha256::new();
        let mut head = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut head).map_err(|_| DataError::Truncated)?;
        hash.update(head);
        if &head[..4] != MAGIC {
            return Err(DataError::Corrupt("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != VERSION {
            return Err(DataError::Corrupt(format!(
                "unsupported version {}",
                u32_at(4)
            )));
        }
        let header = StoreHeader {
            window_len: u32_at(8) as usize,
            n_mics: u32_at(12) as usize,
            count: u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize,
        };
        let expected = HEADER_LEN + header.count as u64 * header.record_len() + 32;
        if size < expected {
            return Err(DataError::Truncated);
        }
        if size > expected {
            return Err(DataError::Corrupt("trailing bytes".into()));
        }
        let mut keys = Vec::with_capacity(header.count);
        let mut targets = Vec::with_capacity(header.count);
        let mut record = vec![0u8; header.record_len() as usize];
        for _ in 0..header.count {
            r.read_exact(&mut record)?;
            hash.update(&record);
            let (key, target) = decode_key(&record);
            keys.push(key);
            targets.push(target);
        }
        let mut sum = [0u8; 32];
        r.read_exact(&mut sum)?;
        if hash.finalize().as_slice() != sum {
            return Err(DataError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            keys,
            targets,
            checksum: hex(&sum),
        })
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[ExampleKey] {
        &self.keys
    }

    pub fn targets(&self) -> &[[f64; 3]] {
        &self.targets
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Loads the windows whose keys satisfy `keep`, in store order.
    pub fn load(&self, keep: impl Fn(&ExampleKey) -> bool) -> Result<ExampleSet, DataError> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.keys[i])).collect();
        self.load_indices(&idx)
    }

    pub fn load_indices(&self, indices: &[usize]) -> Result<ExampleSet, DataError> {
        let mut file = BufReader::new(File::open(&self.path)?);
        let rec = self.header.record_len();
        let n = self.header.window_len * self.header.n_mics;
        let mut set = ExampleSet {
            window_len: self.header.window_len,
            n_mics: self.header.n_mics,
            keys: Vec::with_capacity(indices.len()),
            targets: Vec::with_capacity(indices.len()),
            data: Vec::with_capacity(indices.len()),
        };
        let mut buf = vec![0u8; 4 * n];
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Mismatch(format!("example {i} out of range")));
            }
            file.seek(SeekFrom::Start(HEADER_LEN + i as u64 * rec + KEY_LEN))?;
            file.read_exact(&mut buf)?;
            set.keys.push(self.keys[i]);
            set.targets.push(self.targets[i]);
            set.data.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(set)
    }
}

impl ExampleStore {
    /// A disk-backed selection that reads each window on access, for
    /// datasets too large to hold in memory.
    pub fn view(&self, indices: Vec<usize>) -> StoreView<'_> {
        StoreView {
            store: self,
            indices,
        }
    }

    fn read_window(&self, i: usize) -> Result<Tensor, DataError> {
        let mut file = File::open(&self.path)?;
        let n = self.header.window_len * self.header.n_mics;
        file.seek(SeekFrom::Start(
            HEADER_LEN + i as u64 * self.header.record_len() + KEY_LEN,
        ))?;
        let mut buf = vec![0u8; 4 * n];
        file.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Tensor::new(vec![self.header.window_len, self.header.n_mics], data)
            .map_err(|e| DataError::Corrupt(e.to_string()))
    }
}

pub struct StoreView<'a> {
    store: &'a ExampleStore,
    indices: Vec<usize>,
}

impl Samples for StoreView<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    /// Panics if the validated store file has since become unreadable.
    fn input(&self, i: usize) -> Tensor {
        self.store
            .read_window(self.indices[i])
            .unwrap_or_else(|e| panic!("example store became unreadable: {e}"))
    }

    fn target(&self, i: usize) -> Vec<f64> {
        self.store.targets[self.indices[i]].to_vec()
    }
}

fn decode_key(record: &[u8]) -> (ExampleKey, [f64; 3]) {
    let u = |o: usize| u32::from_le_bytes(record[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f = |o: usize| f64::from_le_bytes(record[o..o + 8].try_into().expect("8 bytes"));
    (
        ExampleKey {
            condition: u(0),
            source: u(4),
            window: u(8),
        },
        [f(12), f(20), f(28)],
    )
}

/// Windows held in memory as `f32`, widened to `f64` tensors on access.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSet {
    pub window_len: usize,
    pub n_mics: usize,
    pub keys: Vec<ExampleKey>,
    pub targets: Vec<[f64; 3]>,
    pub data: Vec<Vec<f32>>,
}

impl ExampleSet {
    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::new(
            vec![self.window_len, self.n_mics],
            self.data[i].iter().map(|v| f64::from(*v)).collect(),
        )
        .expect("store windows have the declared shape")
    }

    pub fn example(&self, i: usize) -> Example {
        Example {
            input: self.tensor(i),
            target: self.targets[i].to_vec(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&ExampleKey) -> bool) -> ExampleSet {
        let idx: Vec<usize> = (0..self.keys.len())
            .filter(|&i| keep(&self.keys[i]))
            .collect();
        ExampleSet {
            window_len: self.window_len,
            n_mics: self.n_mics,
            keys: idx.iter().map(|&i| self.keys[i]).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            data: idx.iter().map(|&i| self.data[i].clone()).collect(),
        }
    }
}

impl Samples for ExampleSet {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn input(&self, i: usize) -> Tensor {
        self.tensor(i)
    }

    fn target(&self, i: usize) -> Vec<f64> {
        self.targets[i].to_vec()
    }
}
