//! Binary patch cache.
//!
//! Layout: `HCBP`, a version byte, the data length as `u64` LE, the
//! mean-subtracted `3×S×S` planes of every cached patch as `f32` LE, and a
//! trailing JSON index. Writing the index last lets extraction stream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hcb_core::balance::PatchAvailability;
use hcb_core::image::Image;
use hcb_core::manifest::Manifest;
use hcb_core::patchex::{rank_tiles, write_preprocessed, ClassCounts, PatchClass, PatchConfig};
use hcb_core::pipeline::PatchSource;
use hcb_core::Error as CoreError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{imageio, Error, Result};

pub const MAGIC: &[u8; 4] = b"HCBP";
pub const VERSION: u8 = 1;
const HEADER: u64 = 13;
/// Images decoded per parallel batch while extracting.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedPatch {
    pub origin: (usize, usize),
    pub class: PatchClass,
    pub stds: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub image_path: String,
    /// Tiles in the whole image; `patches` holds the best-ranked ones.
    pub tiles: usize,
    pub patches: Vec<CachedPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheIndex {
    pub version: u8,
    pub config: PatchConfig,
    pub patches_per_image: usize,
    pub images: Vec<CacheEntry>,
}

impl CacheIndex {
    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for p in self.images.iter().flat_map(|e| &e.patches) {
            match p.class {
                PatchClass::Homogeneous => c.homogeneous += 1,
                PatchClass::NonHomogeneous => c.non_homogeneous += 1,
                PatchClass::Saturated => c.saturated += 1,
            }
        }
        c
    }

    pub fn n_patches(&self) -> usize {
        self.images.iter().map(|e| e.patches.len()).sum()
    }

    /// Cached patches per image, as seen by quota realization.
    pub fn availability(&self) -> BTreeMap<String, usize> {
        self.images.iter().map(|e| (e.image_path.clone(), e.patches.len())).collect()
    }
}

fn plane_len(cfg: &PatchConfig) -> usize {
    3 * cfg.size * cfg.size
}

/// Ranks one image and cuts its best `p` patches.
pub fn extract_image(image_path: &str, img: &Image<u8>, cfg: &PatchConfig, p: usize) -> Result<(CacheEntry, Vec<f32>)> {
    let ranked = rank_tiles(img, cfg)?;
    let len = plane_len(cfg);
    let take = ranked.len().min(p);
    let mut data = vec![0.0f32; take * len];
    let mut patches = Vec::with_capacity(take);
    for (t, out) in ranked.iter().take(take).zip(data.chunks_exact_mut(len)) {
        write_preprocessed(img, t.origin, cfg.size, out);
        patches.push(CachedPatch { origin: t.origin, class: t.class, stds: t.channel_stds });
    }
    Ok((CacheEntry { image_path: image_path.into(), tiles: ranked.len(), patches }, data))
}

/// Extracts up to `p` patches from every manifest image under `root` and
/// writes the cache to `path`. Output does not depend on the thread count.
pub fn build_cache(path: &Path, manifest: &Manifest, root: &Path, cfg: &PatchConfig, p: usize) -> Result<CacheIndex> {
    cfg.validate()?;
    if p == 0 {
        return Err(CoreError::ZeroPatchCount.into());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(Error::io(&tmp))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::Io { path: tmp.clone(), source: e };
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[VERSION]).map_err(io)?;
    w.write_all(&0u64.to_le_bytes()).map_err(io)?;
    let mut images = Vec::with_capacity(manifest.len());
    let mut data_len = 0u64;
    for chunk in manifest.records().chunks(CHUNK) {
        let done: Vec<(CacheEntry, Vec<u8>)> = chunk
            .par_iter()
            .map(|r| {
                let img = imageio::load_rgb8(&root.join(&r.path))?;
                let (entry, data) = extract_image(&r.path, &img, cfg, p)?;
                Ok((entry, data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            })
            .collect::<Result<_>>()?;
        for (entry, bytes) in done {
            w.write_all(&bytes).map_err(io)?;
            data_len += bytes.len() as u64;
            images.push(entry);
        }
    }
    let index = CacheIndex { version: VERSION, config: *cfg, patches_per_image: p, images };
    serde_json::to_writer(&mut w, &index).map_err(Error::json(&tmp))?;
    w.seek(SeekFrom::Start(5)).map_err(io)?;
    w.write_all(&data_len.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(Error::io(path))?;
    Ok(index)
}

/// Read side of the cache; patches are read from disk on demand.
pub struct PatchCache {
    path: PathBuf,
    index: CacheIndex,
    /// Image path → (entry, byte offset of its first patch).
    offsets: BTreeMap<String, (usize, u64)>,
    file: Mutex<File>,
}

impl PatchCache {
    pub fn open(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut file = File::open(path).map_err(Error::io(path))?;
        let mut header = [0u8; HEADER as usize];
        file.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(bad("not a patch cache"));
        }
        if header[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", header[4])));
        }
        let data_len = u64::from_le_bytes(header[5..].try_into().expect("8 bytes"));
        file.seek(SeekFrom::Start(HEADER + data_len)).map_err(Error::io(path))?;
        let mut json = Vec::new();
        file.read_to_end(&mut json).map_err(Error::io(path))?;
        let index: CacheIndex = serde_json::from_slice(&json).map_err(Error::json(path))?;
        index.config.validate()?;
        let plane = plane_len(&index.config) as u64 * 4;
        if index.n_patches() as u64 * plane != data_len {
            return Err(bad("index does not match the data length"));
        }
        let mut offsets = BTreeMap::new();
        let mut at = HEADER;
        for (i, e) in index.images.iter().enumerate() {
            if offsets.insert(e.image_path.clone(), (i, at)).is_some() {
                return Err(bad(&format!("duplicate image {}", e.image_path)));
            }
            at += e.patches.len() as u64 * plane;
        }
        Ok(Self { path: path.to_path_buf(), index, offsets, file: Mutex::new(file) })
    }

    pub fn index(&self) -> &CacheIndex {
        &self.index
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl PatchAvailability for PatchCache {
    fn available(&self, image: &str) -> Option<usize> {
        self.offsets.get(image).map(|&(i, _)| self.index.images[i].patches.len())
    }
}

impl PatchSource for PatchCache {
    fn load(&self, image: &str, rank: usize, out: &mut [f32]) -> hcb_core::Result<()> {
        let missing = || CoreError::MissingFromCache(format!("{image}#{rank}"));
        let &(i, start) = self.offsets.get(image).ok_or_else(missing)?;
        if rank >= self.index.images[i].patches.len() {
            return Err(missing());
        }
        let len = plane_len(&self.index.config);
        if out.len() != len {
            return Err(CoreError::ShapeMismatch { op: "cache", detail: format!("buffer of {} for {len} values", out.len()) });
        }
        let mut bytes = vec![0u8; len * 4];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(start + (rank * len * 4) as u64))
                .and_then(|_| f.read_exact(&mut bytes))
                .map_err(|_| missing())?;
        }
        for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        Ok(())
    }
}
