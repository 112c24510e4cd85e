//! Weight container: magic "LSWT", u32 version, u32 tensor count, then per
//! tensor a u32-length UTF-8 name, u32 rank, u64 dims and little-endian f32
//! payload. A CRC-32 of everything before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;

pub const MAGIC: &[u8; 4] = b"LSWT";
pub const VERSION: u32 = 1;

/// Serializes every named tensor, buffers included, in visiting order.
pub fn write_checkpoint<M: Module<f32>>(model: &M) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count_at = out.len();
    out.extend_from_slice(&0u32.to_le_bytes());
    let mut count = 0u32;
    model.visit("", &mut |p| {
        count += 1;
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out[count_at..count_at + 4].copy_from_slice(&count.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Entry {
    dims: Vec<usize>,
    values: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, Entry)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: absurd dims")))?, &name)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Entry { dims, values }));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", body.len() - r.pos)));
    }
    Ok(entries)
}

/// Loads into an already-built model. Every model tensor must be present with
/// the same shape, and the file must not hold tensors the model lacks.
pub fn read_checkpoint<M: Module<f32>>(model: &mut M, bytes: &[u8]) -> Result<()> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (name, e) in parse(bytes)? {
        if entries.insert(name.clone(), e).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    // validate before touching any weights
    let mut problem: Option<String> = None;
    let mut seen = std::collections::BTreeSet::new();
    model.visit("", &mut |p| {
        seen.insert(p.name.to_string());
        if problem.is_some() {
            return;
        }
        match entries.get(p.name) {
            None => problem = Some(format!("missing tensor '{}'", p.name)),
            Some(e) if e.dims != p.dims => {
                problem = Some(format!("tensor '{}' has shape {:?} in file, model expects {:?}", p.name, e.dims, p.dims))
            }
            _ => {}
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Checkpoint(msg));
    }
    if let Some(extra) = entries.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor '{extra}' not present in the model")));
    }
    model.visit_mut("", &mut |p| p.value.copy_from_slice(&entries[p.name].values));
    Ok(())
}

pub fn save_checkpoint<M: Module<f32>>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path.as_ref(), &write_checkpoint(model))
}

pub fn load_checkpoint<M: Module<f32>>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    read_checkpoint(model, &super::read_file(path)?).map_err(|e| e.at_path(path))
}
