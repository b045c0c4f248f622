//! Weight files: a 32-byte magic, a little-endian u64 header length, a
//! JSON header and a flat little-endian weight blob in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{NetSpec, Network};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8] = b"ARVAE-CKPT-v1";
const MAGIC_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub seed: u64,
    pub step: u64,
    pub nets: Vec<NetSpec>,
    pub tensors: Vec<TensorEntry>,
    /// Model-level settings (training config, normalization, ...).
    pub meta: serde_json::Value,
}

/// Serializes networks and their weights to bytes.
pub fn encode<T: Scalar>(nets: &[&Network<T>], seed: u64, step: u64, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for net in nets {
        for (name, p) in net.param_names().into_iter().zip(&net.params) {
            tensors.push(TensorEntry {
                name,
                shape: p.shape.clone(),
            });
            for v in &p.data {
                v.write_le(&mut blob);
            }
        }
    }
    let header = CheckpointHeader {
        dtype: T::DTYPE.into(),
        seed,
        step,
        nets: nets.iter().map(|n| n.spec.clone()).collect(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC_LEN + 8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.resize(MAGIC_LEN, 0);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses bytes written by [`encode`] back into networks.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Network<T>>)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < MAGIC_LEN + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[MAGIC_LEN..MAGIC_LEN + 8].try_into().unwrap()) as usize;
    let start = MAGIC_LEN + 8;
    let json = bytes
        .get(start..start + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.dtype != T::DTYPE {
        return Err(bad(&format!(
            "stored as {}, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut blob = &bytes[start + hlen..];
    let mut nets = Vec::new();
    let mut entries = header.tensors.iter();
    for spec in &header.nets {
        let names = spec.param_names();
        let mut params = Vec::with_capacity(names.len());
        for name in names {
            let e = entries.next().ok_or_else(|| bad("too few tensors"))?;
            if e.name != name {
                return Err(bad(&format!("expected tensor {name}, found {}", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let nbytes = n * T::BYTES;
            if blob.len() < nbytes {
                return Err(bad("truncated weights"));
            }
            let data = blob[..nbytes].chunks_exact(T::BYTES).map(T::read_le).collect();
            blob = &blob[nbytes..];
            params.push(Tensor::new(e.shape.clone(), data)?);
        }
        nets.push(Network::from_params(spec.clone(), params)?);
    }
    if !blob.is_empty() || entries.next().is_some() {
        return Err(bad("trailing data"));
    }
    Ok((header, nets))
}

pub fn save<T: Scalar>(
    path: &Path,
    nets: &[&Network<T>],
    seed: u64,
    step: u64,
    meta: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode(nets, seed, step, meta)?).at(path)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, Vec<Network<T>>)> {
    decode(&std::fs::read(path).at(path)?)
}
