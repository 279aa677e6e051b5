//! Binary checkpoint format, all little-endian:
//!
//! ```text
//! "RVSL" | u32 version (=1) | u32 record count
//! per record: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f64 values (row-major)
//! ```
//!
//! Batch-norm running statistics are stored as ordinary records.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{build_models, ModuleSet, NetConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RVSL";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode(models: &ModuleSet) -> Vec<u8> {
    encode_records(models.params().map(|p| (p.name.as_str(), &p.value)))
}

pub fn encode_records<'a>(records: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a checkpoint into `(name, tensor)` records in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")? as usize;
    // every record needs at least 2 + 1 bytes
    if count > r.remaining() / 3 {
        return Err(Error::Checkpoint(format!("record count {count} exceeds file size")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record `{name}`: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dim")? as usize;
            if d == 0 {
                return Err(Error::Checkpoint(format!("record `{name}`: zero-sized dimension")));
            }
            numel = numel
                .checked_mul(d)
                .filter(|n| *n <= r.buf.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: shape exceeds file size")))?;
            shape.push(d);
        }
        let raw = r.take(numel * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

/// Rebuilds a module set for `cfg` from checkpoint records. The record set
/// must match the architecture exactly.
pub fn restore(cfg: &NetConfig, records: Vec<(String, Tensor)>) -> Result<ModuleSet> {
    let mut models = build_models(cfg, 0)?;
    let expected = models.params().count();
    if records.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} records, found {}", records.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in records {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
        let slot = models
            .find_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(models)
}

pub fn save(path: &Path, models: &ModuleSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(models))?;
    Ok(())
}

pub fn load(path: &Path, cfg: &NetConfig) -> Result<ModuleSet> {
    restore(cfg, decode(&std::fs::read(path)?)?)
}
