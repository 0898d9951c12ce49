//! File formats, dataset ingest, patch caching, checkpoints and experiment
//! orchestration on top of [`hcb_core`].

pub mod cache;
pub mod checkpoint;
pub mod config;
mod error;
pub mod experiment;
pub mod imageio;
pub mod ingest;
pub mod source;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of the value's JSON encoding.
pub fn json_hash<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Package version, logged with every run.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
