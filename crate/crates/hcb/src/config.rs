//! JSON run configuration. Defaults are the full-scale training values;
//! unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use hcb_core::hcbnet::{BrandSpec, HeadKind, NetworkSpec};
use hcb_core::manifest::{FilterRules, Hierarchy};
use hcb_core::patchex::PatchConfig;
use hcb_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ingest::DEFAULT_PATTERN;
use crate::{json_hash, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Image root; manifest paths are relative to it. Defaults to the output dir.
    pub dataset_root: Option<PathBuf>,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset_root: None, cache_dir: None, output_dir: PathBuf::from("hcb-out") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Toy,
}

/// Where the network architecture comes from. Presets take their hierarchy
/// from the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkRef {
    Preset(Preset),
    File(PathBuf),
    Inline(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldSettings {
    pub n_folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FoldSettings {
    fn default() -> Self {
        Self { n_folds: 5, val_fraction: 0.15, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub name_pattern: String,
    pub apply_filters: bool,
    pub filters: FilterRules,
    pub patches: PatchConfig,
    /// Ranked patches cached per image.
    pub patch_count: usize,
    pub folds: FoldSettings,
    pub train: TrainConfig,
    pub network: NetworkRef,
    pub heads: Vec<HeadKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            name_pattern: DEFAULT_PATTERN.into(),
            apply_filters: true,
            filters: FilterRules::default(),
            patches: PatchConfig::default(),
            patch_count: 200,
            folds: FoldSettings::default(),
            train: TrainConfig::default(),
            network: NetworkRef::Preset(Preset::Paper),
            heads: vec![HeadKind::Hierarchical],
        }
    }
}

/// The parts of a run that determine its numbers, hashed into checkpoints.
#[derive(Serialize)]
struct Fingerprint<'a> {
    patches: &'a PatchConfig,
    patch_count: usize,
    folds: &'a FoldSettings,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: hcb_core::Error| Error::Config(e.to_string());
        self.patches.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if self.patch_count == 0 {
            return Err(Error::Config("patch_count must be positive".into()));
        }
        if self.folds.n_folds == 0 || !(self.folds.val_fraction > 0.0 && self.folds.val_fraction < 0.5) {
            return Err(Error::Config("folds need n_folds ≥ 1 and 0 < val_fraction < 0.5".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("no heads selected".into()));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.clone().unwrap_or_else(|| self.paths.output_dir.join("cache"))
    }

    pub fn cache_file(&self) -> PathBuf {
        self.cache_dir().join("patches.hcbp")
    }

    pub fn dataset_root(&self) -> &Path {
        self.paths.dataset_root.as_deref().unwrap_or(&self.paths.output_dir)
    }

    pub fn manifest_file(&self) -> PathBuf {
        self.paths.output_dir.join("manifest.json")
    }

    pub fn folds_file(&self) -> PathBuf {
        self.paths.output_dir.join("folds.json")
    }

    /// Hash of everything that shapes the numbers, paths excluded.
    pub fn fingerprint(&self) -> String {
        json_hash(&Fingerprint {
            patches: &self.patches,
            patch_count: self.patch_count,
            folds: &self.folds,
            train: &self.train,
        })
    }

    pub fn network_spec(&self, hierarchy: &Hierarchy, head: HeadKind) -> Result<NetworkSpec> {
        let brands = brand_specs(hierarchy);
        let spec = match &self.network {
            NetworkRef::Preset(Preset::Toy) => NetworkSpec::toy(brands, head),
            NetworkRef::Preset(Preset::Paper) => {
                let mut s = NetworkSpec::paper_default().with_head(head);
                s.hierarchy = brands;
                s.flat_fc_dims[2] = s.n_models();
                s
            }
            NetworkRef::File(path) => {
                let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
                let s: NetworkSpec = serde_json::from_str(&text).map_err(Error::json(path))?;
                s.with_head(head)
            }
            NetworkRef::Inline(s) => s.clone().with_head(head),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Brands and their models in sorted order.
pub fn brand_specs(h: &Hierarchy) -> Vec<BrandSpec> {
    h.brand_models().into_iter().map(|(brand, models)| BrandSpec { brand, models }).collect()
}
