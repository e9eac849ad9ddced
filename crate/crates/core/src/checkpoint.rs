//! Flat binary checkpoints.
//!
//! Layout: the 8-byte magic `MDLCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values back to back as little-endian
//! floats of the header's dtype. Tensor names follow the parameter names
//! (`base/…`, `adapter/{d}/{loc}/…`, `head/{d}/…`, `ln/{loc}/…`) plus
//! `stats/…` entries for BatchNorm running statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MdlNetwork, NetworkConfig};
use crate::real::Real;
use crate::tensor::HasParams;

const MAGIC: &[u8; 8] = b"MDLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config: NetworkConfig,
    /// Free-form provenance such as seed and config hash.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn width<T: Real>() -> usize {
    std::mem::size_of::<T>()
}

fn encode<T: Real>(v: T, out: &mut Vec<u8>) {
    match width::<T>() {
        4 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

fn decode<T: Real>(b: &[u8]) -> T {
    match b.len() {
        4 => T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
        _ => T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))),
    }
}

/// Serialises parameters and running statistics of `net`.
pub fn to_bytes<T: Real>(net: &MdlNetwork<T>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset,
        });
        offset += values.len();
        values.iter().for_each(|&v| encode(v, &mut data));
    };
    for (_, p) in net.params().iter() {
        push(&p.name, p.tensor.shape().to_vec(), p.tensor.data());
    }
    for (name, values) in net.running_stats() {
        push(&name, vec![values.len()], &values);
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        dtype: T::NAME.to_string(),
        config: net.config().clone(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Parse {
        source_name: "checkpoint".into(),
        detail: what.into(),
    }
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    Ok((header, &bytes[16 + len..]))
}

/// Rebuilds a network from its serialised form. The dtype must match `T`.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(MdlNetwork<T>, CheckpointHeader)> {
    let (header, data) = read_header(bytes)?;
    if header.dtype != T::NAME {
        return Err(corrupt(format!("checkpoint holds {}, requested {}", header.dtype, T::NAME)));
    }
    let w = width::<T>();
    let mut net = MdlNetwork::<T>::new(header.config.clone())?;
    let mut stats = BTreeMap::new();
    let mut seen = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset * w..(e.offset + n) * w)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past the data section", e.name)))?;
        let values: Vec<T> = raw.chunks_exact(w).map(decode).collect();
        if e.name.starts_with("stats/") {
            stats.insert(e.name.clone(), values);
            continue;
        }
        let id = net
            .params()
            .lookup(&e.name)
            .ok_or_else(|| corrupt(format!("unknown tensor `{}`", e.name)))?;
        let t = net.params_mut().tensor_mut(id);
        if t.shape() != e.shape.as_slice() {
            return Err(corrupt(format!("`{}` has shape {:?}, expected {:?}", e.name, e.shape, t.shape())));
        }
        t.data_mut().copy_from_slice(&values);
        seen += 1;
    }
    if seen != net.params().len() {
        return Err(corrupt(format!("{} of {} parameters present", seen, net.params().len())));
    }
    net.restore_running_stats(&stats)?;
    Ok((net, header))
}

pub fn save<T: Real>(net: &MdlNetwork<T>, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let bytes = to_bytes(net, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(MdlNetwork<T>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
