//! `MNCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MNCK" | version u32 | spec_len u32 | spec (key = value text)
//! seed u64 | epoch u64 | count u32
//! count × { name_len u32 | name | rank u32 | extents u32×rank | f32×numel }
//! fnv1a64 of every preceding byte, u64
//! ```
//!
//! Entries list the parameters in store order, then `running_mean` and
//! `running_var` of every batch-norm buffer.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{model_spec_echo, model_spec_parse, ConfigError};
use crate::error::TensorError;
use crate::model::{build, Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNCK";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1024;
const MAX_RANK: usize = 8;
const MAX_SPEC: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("model spec: {0}")]
    Spec(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("entry {index} is {found:?}, model expects {expected:?}")]
    Mismatch { index: usize, found: String, expected: String },
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: u64,
    pub entries: Vec<Entry>,
}

fn entry<T: Scalar>(name: String, t: &Tensor<T>) -> Entry {
    Entry { name, shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.as_f64() as f32).collect() }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, epoch: u64) -> Self {
        let mut entries: Vec<Entry> = model.params.iter().map(|p| entry(p.name.clone(), &p.tensor)).collect();
        for (name, s) in model.buffers.iter() {
            entries.push(entry(format!("{name}.running_mean"), &s.mean));
            entries.push(entry(format!("{name}.running_var"), &s.var));
        }
        Self { spec: model.spec.clone(), seed: model.spec.seed, epoch, entries }
    }

    /// Rebuild the network and copy the stored values in.
    pub fn to_model(&self) -> Result<Model<f32>, CheckpointError> {
        let mut model = build::<f32>(&self.spec)?;
        let expected = model.params.len() + 2 * model.buffers.len();
        if self.entries.len() != expected {
            return Err(CheckpointError::Malformed(format!("{} entries, model has {expected}", self.entries.len())));
        }
        let mut it = self.entries.iter().enumerate();
        let mut fill = |want: &str, dst: &mut Tensor<f32>| -> Result<(), CheckpointError> {
            let (index, e) = it.next().expect("entry count checked above");
            if e.name != want || e.shape != dst.shape() {
                return Err(CheckpointError::Mismatch {
                    index,
                    found: format!("{} {:?}", e.name, e.shape),
                    expected: format!("{want} {:?}", dst.shape()),
                });
            }
            dst.data_mut().copy_from_slice(&e.data);
            Ok(())
        };
        for p in model.params.iter_mut() {
            fill(&p.name, &mut p.tensor)?;
        }
        for (name, s) in model.buffers.iter_mut() {
            fill(&format!("{name}.running_mean"), &mut s.mean)?;
            fill(&format!("{name}.running_var"), &mut s.var)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = model_spec_echo(&self.spec);
        let numel: usize = self.entries.iter().map(|e| e.data.len()).sum();
        let mut out = Vec::with_capacity(64 + spec.len() + numel * 4 + self.entries.len() * 64);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        u32le(&mut out, spec.len());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        u32le(&mut out, self.entries.len());
        for e in &self.entries {
            u32le(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            u32le(&mut out, e.shape.len());
            for &d in &e.shape {
                u32le(&mut out, d);
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let spec_len = r.len(MAX_SPEC, "spec")?;
        let spec_text = std::str::from_utf8(r.take(spec_len)?)
            .map_err(|_| CheckpointError::Malformed("spec is not UTF-8".into()))?;
        let spec = model_spec_parse(spec_text)?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        // each entry needs at least its two length words
        if count > r.remaining() / 8 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.len(MAX_NAME, "name")?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.len(MAX_RANK, "rank")?;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                numel =
                    numel.checked_mul(d).ok_or_else(|| CheckpointError::Malformed("entry size overflows".into()))?;
                shape.push(d);
            }
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.u64()?;
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        if fnv1a64(&bytes[..body_end]) != stored {
            return Err(CheckpointError::Checksum);
        }
        if seed != spec.seed {
            return Err(CheckpointError::Malformed(format!("seed {seed} disagrees with spec seed {}", spec.seed)));
        }
        Ok(Self { spec, seed, epoch, entries })
    }

    /// Write via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_owned(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_owned(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn len(&mut self, max: usize, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(CheckpointError::Malformed(format!("{what} length {n} exceeds {max}")));
        }
        Ok(n)
    }
}
