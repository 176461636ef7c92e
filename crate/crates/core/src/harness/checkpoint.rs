//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `DBRF`, `u32` version, `u64` config hash,
//! `u64` step, `u64` normaliser update count, `u32` metadata length and
//! UTF-8 metadata, `u32` block count, then per block: `u32` name length,
//! name, `u8` dtype (1 = f64), `u32` rank, `u64` dims, data.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::nn::ParamStore;
use crate::optimizer::RunningNorm;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DBRF";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const NORM_MEAN: &str = "norm.mean";
const NORM_VAR: &str = "norm.var";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub step: u64,
    /// Free-form `key=value` lines.
    pub metadata: String,
    /// Parameters in store order, then the normaliser statistics.
    pub tensors: Vec<(String, Tensor)>,
    pub norm_updates: u64,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, norm: &RunningNorm, config_hash: u64, step: u64, metadata: &str) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let (mean, var, updates) = norm.to_tensors();
        tensors.push((NORM_MEAN.into(), mean));
        tensors.push((NORM_VAR.into(), var));
        Self { version: VERSION, config_hash, step, metadata: metadata.into(), tensors, norm_updates: updates }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies parameters into `store` (every store parameter must be
    /// present with the same shape) and returns the normaliser.
    pub fn restore(&self, store: &mut ParamStore, momentum: f64) -> Result<RunningNorm> {
        let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("parameter block `{name}` missing")))?;
            store.set_by_name(&name, t.clone())?;
        }
        let mean = self.tensor(NORM_MEAN).ok_or_else(|| Error::CorruptCheckpoint("block `norm.mean` missing".into()))?;
        let var = self.tensor(NORM_VAR).ok_or_else(|| Error::CorruptCheckpoint("block `norm.var` missing".into()))?;
        if mean.shape() != var.shape() || mean.ndim() != 1 {
            return Err(Error::CorruptCheckpoint("normaliser blocks disagree in shape".into()));
        }
        let mut norm = RunningNorm::new(mean.numel(), momentum);
        norm.mean = mean.data().to_vec();
        norm.var = var.data().to_vec();
        norm.updates = self.norm_updates;
        Ok(norm)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.norm_updates.to_le_bytes());
        b.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        b.extend_from_slice(self.metadata.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    /// Parses a checkpoint; `expected_hash` refuses other configurations.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, block: "header".into() };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes (not a DBRF checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let config_hash = r.u64()?;
        if let Some(expected) = expected_hash {
            if expected != config_hash {
                return Err(Error::ConfigHashMismatch { expected, found: config_hash });
            }
        }
        let step = r.u64()?;
        let norm_updates = r.u64()?;
        r.block = "metadata".into();
        let mlen = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(mlen)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("metadata is not UTF-8".into()))?;
        r.block = "block count".into();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            r.block = format!("block {i}");
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint(format!("block {i}: name is not UTF-8")))?;
            r.block = format!("block {i} `{name}`");
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::CorruptCheckpoint(format!("{}: unknown dtype {dtype}", r.block)));
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("{}: rank {rank} too large", r.block)));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("{}: shape {shape:?} larger than the file", r.block))
            })?;
            let raw = r.take(8 * n)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes after the last block", bytes.len() - r.pos)));
        }
        Ok(Self { version, config_hash, step, metadata, tensors, norm_updates })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    block: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated in {} (needed {n} bytes at offset {}, file has {})",
                self.block,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
