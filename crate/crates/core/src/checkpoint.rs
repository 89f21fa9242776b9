//! Binary checkpoints: the run configuration plus every named parameter.
//!
//! Layout (little endian): magic `SPKCKPT1`, `u32` version, `u32` length and
//! UTF-8 bytes of the configuration text, `u32` entry count, then per entry
//! a `u16` name length and name, a `u8` kind (0 trainable, 1 buffer), a `u8`
//! rank, `u32` dims and the `f64` values.

use std::path::Path;

use crate::config::RunConfig;
use crate::ctx::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPKCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, store: &ParamStore) -> Self {
        let entries = store
            .entries()
            .iter()
            .map(|e| CheckpointEntry { name: e.name.clone(), kind: e.kind, value: e.value.clone() })
            .collect();
        Self { config: config.clone(), entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.push(e.value.shape().len() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("configuration is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Format(format!("unknown parameter kind {k}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(CheckpointEntry { name, kind, value: Tensor::new(&shape, data)? });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last parameter".into()));
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model from the stored configuration and copies every
    /// parameter into it. Names, kinds and shapes must match exactly.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(self.config.model.clone(), self.config.train.seed)?;
        if store.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| Error::Format(format!("unexpected parameter `{}`", e.name)))?;
            if store.entry(id).kind != e.kind {
                return Err(Error::Format(format!("parameter `{}` changed kind", e.name)));
            }
            store.set(id, e.value.clone())?;
        }
        Ok((model, store))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
