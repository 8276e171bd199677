//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MTCK"  u32 version  u64 header_len  header_len bytes of JSON header
//! then, for every tensor in header order, its values as f32
//! then, for every buffer in header order, `mean` then `var` as f32
//! ```
//!
//! The JSON header holds the [`ModelSpec`], the init seed, and the name and
//! shape of every tensor and batch-norm buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::params::{Buffers, Params};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{BnStats, Tensor};

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<Entry>,
    buffers: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialize a model; weights are stored as `f32`.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        tensors: model
            .params
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        buffers: model
            .buffers
            .iter()
            .map(|(n, s)| Entry {
                name: n.clone(),
                shape: vec![s.mean.len()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        put_f32s(&mut out, t.values());
    }
    for s in model.buffers.values() {
        put_f32s(&mut out, &s.mean);
        put_f32s(&mut out, &s.var);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    header.spec.validate()?;
    let mut params = Params::new();
    for e in &header.tensors {
        let n = e.shape.iter().product();
        params.insert(e.name.clone(), Tensor::new(&e.shape, cur.f32s(n)?)?);
    }
    let mut buffers = Buffers::new();
    for e in &header.buffers {
        let n = e.shape.first().copied().unwrap_or(0);
        let mean = cur.f32s(n)?;
        let var = cur.f32s(n)?;
        buffers.insert(e.name.clone(), BnStats { mean, var });
    }
    if cur.at != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.at
        )));
    }
    let fresh = Model::new(header.spec.clone(), header.seed)?;
    for (name, t) in fresh.params.iter() {
        match params.get(name) {
            Some(got) if got.shape() == t.shape() => {}
            Some(got) => {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{name}` has shape {:?}, spec implies {:?}",
                    got.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Data(format!("checkpoint is missing tensor `{name}`"))),
        }
    }
    Ok(Model {
        spec: header.spec,
        params,
        buffers,
        seed: header.seed,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
