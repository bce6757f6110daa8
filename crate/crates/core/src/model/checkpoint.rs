//! Binary checkpoint format.
//!
//! ```text
//! "TLMCKPT1"
//! u64 record length, UTF-8 record (`key = value` lines)
//! u64 tensor count
//! per tensor: u64 name length, name, u64 rank, u64 dims…, f32 data…
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use tlm_tensor::Tensor;

use super::{Model, ModelConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TLMCKPT1";

/// A model plus free-form metadata stored next to its config record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            meta: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let mut record = model.config().to_record();
    for (k, v) in &ckpt.meta {
        record.push_str(&format!("meta.{k} = {v}\n"));
    }
    let mut out = Vec::with_capacity(16 + record.len() + 4 * model.num_floats());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(record.len() as u64).to_le_bytes());
    out.extend_from_slice(record.as_bytes());
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {n}")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not a TLMCKPT1 file)".into()));
    }
    let n = r.len("record length")?;
    let record = std::str::from_utf8(r.take(n, "config record")?)
        .map_err(|_| Error::Checkpoint("config record is not UTF-8".into()))?;
    let mut model_lines = String::new();
    let mut meta = Vec::new();
    for line in record.lines() {
        match line.strip_prefix("meta.").and_then(|l| l.split_once(" = ")) {
            Some((k, v)) => meta.push((k.to_string(), v.to_string())),
            None => {
                model_lines.push_str(line);
                model_lines.push('\n');
            }
        }
    }
    let config = ModelConfig::from_record(&model_lines)?;
    let count = r.len("tensor count")?;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len("name length")?;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len("rank")?;
        let shape = (0..rank)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<usize>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for {name}")))?;
        let raw = r.take(4 * numel, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        names.push(name);
        params.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model: Model::from_parts(config, names, params)?,
        meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, optionally insisting on a variant family
/// (`"enc-only"` or `"enc-dec"`).
pub fn load_checkpoint(path: &Path, expect_variant: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = read_checkpoint(&bytes)?;
    if let Some(want) = expect_variant {
        let found = ckpt.model.config().variant.name();
        if found != want {
            return Err(Error::VariantMismatch {
                found: found.to_string(),
                expected: want.to_string(),
            });
        }
    }
    Ok(ckpt)
}
