//! `VNDC` checkpoint container.
//!
//! Layout (little-endian): magic `VNDC`, `u32` version, `u32` CRC-32 of the
//! body, `u64` body length, body. The body holds scalar metadata entries
//! (`name`, tag, value) followed by named tensors (`name`, rank, dims,
//! row-major `f64` payload). Strings are `u32`-length prefixed UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Result, VndError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VNDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum MetaValue {
    U64(u64),
    F64(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, MetaValue>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| VndError::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        match self.meta.get(key) {
            Some(MetaValue::U64(v)) => Ok(*v),
            _ => Err(VndError::Format(format!(
                "checkpoint metadata `{key}` missing or not an integer"
            ))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.meta.get(key) {
            Some(MetaValue::F64(v)) => Ok(*v),
            _ => Err(VndError::Format(format!(
                "checkpoint metadata `{key}` missing or not a float"
            ))),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.meta.get(key) {
            Some(MetaValue::Str(v)) => Ok(v),
            _ => Err(VndError::Format(format!(
                "checkpoint metadata `{key}` missing or not a string"
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::default();
        body.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            body.str(k);
            match v {
                MetaValue::U64(x) => {
                    body.u8(0);
                    body.u64(*x);
                }
                MetaValue::F64(x) => {
                    body.u8(1);
                    body.f64(*x);
                }
                MetaValue::Str(s) => {
                    body.u8(2);
                    body.str(s);
                }
            }
        }
        body.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            body.str(&t.name);
            body.u32(t.shape.len() as u32);
            for d in &t.shape {
                body.u64(*d as u64);
            }
            body.f64s(&t.data);
        }
        let mut out = Writer::default();
        out.buf.extend_from_slice(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.u32(crc32fast::hash(&body.buf));
        out.u64(body.buf.len() as u64);
        out.buf.extend_from_slice(&body.buf);
        out.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(VndError::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(VndError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stored = r.u32()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        r.finish()?;
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(VndError::Checksum { stored, computed });
        }
        let mut r = Reader::new(body, "checkpoint body");
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = match r.u8()? {
                0 => MetaValue::U64(r.u64()?),
                1 => MetaValue::F64(r.f64()?),
                2 => MetaValue::Str(r.str()?),
                t => return Err(VndError::Format(format!("unknown metadata tag {t}"))),
            };
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| VndError::Format(format!("tensor `{name}` shape overflows")))?;
            let data = r.f64s(n)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
