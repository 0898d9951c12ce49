//! Patch source over decoded images kept in memory.

use std::collections::BTreeMap;

use hcb_core::balance::PatchAvailability;
use hcb_core::image::Image;
use hcb_core::manifest::ImageRecord;
use hcb_core::patchex::{rank_tiles, write_preprocessed, PatchConfig};
use hcb_core::pipeline::PatchSource;
use hcb_core::Error as CoreError;
use rayon::prelude::*;

use crate::Result;

type Origins = Vec<(usize, usize)>;

/// Images with their ranked tile origins; patches are cut on demand.
pub struct MemorySource {
    images: BTreeMap<String, (Image<u8>, Origins)>,
    size: usize,
}

impl MemorySource {
    /// Ranks the tiles of every image, keeping at most `max_patches` each.
    pub fn new(images: Vec<(ImageRecord, Image<u8>)>, cfg: &PatchConfig, max_patches: usize) -> Result<Self> {
        let ranked: Vec<(String, Image<u8>, Origins)> = images
            .into_par_iter()
            .map(|(r, img)| {
                let tiles = rank_tiles(&img, cfg)?;
                Ok((r.path, img, tiles.iter().take(max_patches).map(|t| t.origin).collect()))
            })
            .collect::<Result<_, CoreError>>()?;
        let images = ranked.into_iter().map(|(p, img, o)| (p, (img, o))).collect();
        Ok(Self { images, size: cfg.size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl PatchAvailability for MemorySource {
    fn available(&self, image: &str) -> Option<usize> {
        self.images.get(image).map(|e| e.1.len())
    }
}

impl PatchSource for MemorySource {
    fn load(&self, image: &str, rank: usize, out: &mut [f32]) -> hcb_core::Result<()> {
        let (img, origins) = self.images.get(image).ok_or_else(|| CoreError::MissingFromCache(image.into()))?;
        let origin = *origins.get(rank).ok_or_else(|| CoreError::MissingFromCache(format!("{image}#{rank}")))?;
        write_preprocessed(img, origin, self.size, out);
        Ok(())
    }
}
