//! Checkpoint container.
//!
//! Layout: `HCBK`, a version byte, the metadata length as `u64` LE, JSON
//! metadata, the array count as `u32` LE, then per array its name (`u32`
//! length + UTF-8), rank (`u32`), dimensions (`u64` each) and `f32` LE
//! values. Nothing time-dependent is stored, so equal networks give equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use hcb_core::hcbnet::{build_network, Network, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::{json_hash, Error, Result};

pub const MAGIC: &[u8; 4] = b"HCBK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lr: f64,
    pub val_accuracy: f64,
    pub config_hash: String,
    pub spec_hash: String,
    pub seed: u64,
    pub version: String,
    pub spec: NetworkSpec,
}

impl CheckpointMeta {
    /// Metadata for `net` with its spec hash filled in.
    pub fn for_network(net: &Network<f32>, epoch: usize, lr: f64, val_accuracy: f64, config_hash: String) -> Self {
        Self {
            epoch,
            lr,
            val_accuracy,
            config_hash,
            spec_hash: json_hash(net.spec()),
            seed: net.seed(),
            version: crate::VERSION.into(),
            spec: net.spec().clone(),
        }
    }
}

pub fn encode(net: &Network<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = net.named_arrays();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, values) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub type Arrays = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Metadata and raw arrays; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointMeta, Arrays)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut r = Reader { bytes, at: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint"));
    }
    let version = r.take(1).ok_or_else(|| bad("truncated"))?[0];
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let meta_len = r.u64().ok_or_else(|| bad("truncated"))? as usize;
    let json = r.take(meta_len).ok_or_else(|| bad("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(Error::json(path))?;
    let n = r.u32().ok_or_else(|| bad("truncated"))?;
    let mut arrays = BTreeMap::new();
    for _ in 0..n {
        let len = r.u32().ok_or_else(|| bad("truncated array name"))? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated array name"))?)
            .map_err(|_| bad("array name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(|| bad("truncated shape"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("oversized array"))?).ok_or_else(|| bad("truncated values"))?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if arrays.insert(name.clone(), (shape, values)).is_some() {
            return Err(bad(&format!("duplicate array {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((meta, arrays))
}

/// Rebuilds the network described by the metadata and fills in its arrays.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let (meta, arrays) = decode(bytes, path)?;
    let found = json_hash(&meta.spec);
    if found != meta.spec_hash {
        return Err(Error::SpecMismatch { expected: meta.spec_hash.clone(), found });
    }
    let mut net = build_network::<f32>(&meta.spec, meta.seed)?;
    net.load_named_arrays(&arrays)?;
    Ok((net, meta))
}

pub fn save(path: &Path, net: &Network<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, encode(net, meta)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes, path)
}

/// Loads a checkpoint and rejects it unless it was written for `spec`.
pub fn load_for(path: &Path, spec: &NetworkSpec) -> Result<(Network<f32>, CheckpointMeta)> {
    let (net, meta) = load(path)?;
    let expected = json_hash(spec);
    if meta.spec_hash != expected {
        return Err(Error::SpecMismatch { expected, found: meta.spec_hash });
    }
    Ok((net, meta))
}
