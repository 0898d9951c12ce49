//! Builds a manifest from a directory of camera images.

use std::path::{Path, PathBuf};

use hcb_core::manifest::{ImageRecord, Manifest};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{imageio, Error, Result};

/// `Brand_Model_Device_Id.ext`; the model may itself contain underscores.
pub const DEFAULT_PATTERN: &str =
    r"^(?P<brand>[^_]+)_(?P<model>.+)_(?P<device>\d+)_(?P<id>[^_.]+)\.(?i:jpe?g|png|tiff?|bmp)$";

/// File-name pattern with `brand`, `model`, `device` and `id` groups.
#[derive(Debug, Clone)]
pub struct NamePattern(Regex);

impl NamePattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::Pattern(e.to_string()))?;
        let names: Vec<&str> = re.capture_names().flatten().collect();
        for g in ["brand", "model", "device", "id"] {
            if !names.contains(&g) {
                return Err(Error::Pattern(format!("missing named group `{g}`")));
            }
        }
        Ok(Self(re))
    }

    /// `(brand, model, device, id)` of a file name.
    pub fn parse(&self, file_name: &str) -> Option<(String, String, u32, String)> {
        let c = self.0.captures(file_name)?;
        let device = c["device"].parse().ok()?;
        Some((c["brand"].to_string(), c["model"].to_string(), device, c["id"].to_string()))
    }
}

impl Default for NamePattern {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERN).expect("default pattern is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SkipReason {
    NameMismatch,
    UnreadableHeader { detail: String },
    TooSmall { width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub path: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<Skip>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: Manifest,
    pub skips: SkipReport,
}

fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// One record per matching, readable image under `root`; everything else
/// lands in the skip report. Images that cannot hold one `min_size` tile
/// are skipped as too small. Only headers are read.
pub fn ingest_dataset(root: &Path, pattern: &NamePattern, min_size: u32) -> Result<Ingested> {
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::Io { path, source: e.into() }
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    let results: Vec<std::result::Result<ImageRecord, Skip>> = files
        .par_iter()
        .map(|p| {
            let rel = relative(root, p);
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let Some((brand, model, device, id)) = pattern.parse(&name) else {
                return Err(Skip { path: rel, reason: SkipReason::NameMismatch });
            };
            let (w, h) = imageio::dimensions(p)
                .map_err(|e| Skip { path: rel.clone(), reason: SkipReason::UnreadableHeader { detail: e.to_string() } })?;
            if w < min_size || h < min_size {
                return Err(Skip { path: rel, reason: SkipReason::TooSmall { width: w, height: h } });
            }
            Ok(ImageRecord { path: rel, brand, model, device_index: device, image_id: id, width: w, height: h })
        })
        .collect();
    let mut records = Vec::new();
    let mut skips = SkipReport::default();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(s) => skips.skipped.push(s),
        }
    }
    Ok(Ingested { manifest: Manifest::new(records)?, skips })
}
