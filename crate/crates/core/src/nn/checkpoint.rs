//! Named-array checkpoint container.
//!
//! Layout: 8-byte magic `ISUPCKPT`, little-endian `u64` header length, a JSON
//! header, then every array as raw little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::{array, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ISUPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Architecture description; loading with a different spec is rejected.
    pub spec: Value,
    pub step: u64,
    /// Free-form extras (schedule state, lambda, momentum, metrics...).
    pub meta: Value,
    pub groups: Vec<(String, ParamSet<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    spec: Value,
    step: u64,
    meta: Value,
    arrays: Vec<ArrayHeader>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, spec: Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            spec,
            step: 0,
            meta: Value::Null,
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: impl Into<String>, params: ParamSet<f32>) -> Self {
        self.groups.push((name.into(), params));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet<f32>> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` group")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self
            .groups
            .iter()
            .flat_map(|(g, ps)| {
                ps.iter().map(move |p| ArrayHeader {
                    group: g.clone(),
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
            })
            .collect();
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            spec: self.spec.clone(),
            step: self.step,
            meta: self.meta.clone(),
            arrays,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, ps) in &self.groups {
            for p in ps.iter() {
                for v in p.value.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut data = &bytes[16 + hlen..];
        let mut groups: Vec<(String, ParamSet<f32>)> = Vec::new();
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            if data.len() < n * 4 {
                return Err(bad("truncated array data"));
            }
            let values = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[n * 4..];
            if groups.last().map(|(g, _)| g != &a.group).unwrap_or(true) {
                groups.push((a.group.clone(), ParamSet::new()));
            }
            groups.last_mut().expect("pushed").1.push(a.name, array(&a.shape, values));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after arrays"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            spec: header.spec,
            step: header.step,
            meta: header.meta,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Loads and rejects a different kind or architecture spec.
    pub fn load_expecting(path: &Path, kind: &str, spec: &Value) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                ckpt.kind
            )));
        }
        if &ckpt.spec != spec {
            return Err(Error::Checkpoint(format!(
                "{}: architecture spec mismatch",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}
