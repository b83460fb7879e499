//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "SMACKPT\0"
//! version  u32
//! config   u32 byte length, then UTF-8 "key=value\n" lines
//! count    u32 tensor count
//! tensor   u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!          product(dims) × f64 row-major data
//! ```

use std::fs;
use std::path::Path;

use super::config::{parse_task, task_str};
use super::{ModelConfig, SmaModel};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() < len {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (head, rest) = self.buf.split_at(len);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let len = self.u32()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl SmaModel {
    /// `key=value` configuration stored in checkpoints.
    pub fn config_block(&self) -> String {
        let mut pairs = self.config.to_pairs();
        pairs.insert("head".into(), task_str(self.head.as_ref().map(|h| h.task)));
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_block());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let block = r.string()?;
        let mut config = ModelConfig::tiny(crate::attention::AttentionKind::SelfAttention);
        let pairs = block
            .lines()
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed config line '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut head = None;
        for (k, v) in config.apply_pairs(pairs)? {
            match k {
                "head" => head = parse_task(v)?,
                other => return Err(Error::Checkpoint(format!("unknown config key '{other}'"))),
            }
        }
        // Structure only; every tensor is overwritten below.
        let mut model = SmaModel::new(config, &mut Rng::new(0))?;
        if let Some(task) = head {
            model.attach_head(task, &mut Rng::new(0));
        }
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, configuration expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name = r.string()?.to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if model.params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor '{name}' has shape {shape:?}")));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *model.params.get_mut(id) = Tensor::new(shape, data)?;
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
