//! Homogeneous patch selection.
//!
//! Images are tiled into square blocks on a fixed stride. Each block is
//! classified by the population standard deviation of its three channels on
//! unit-scaled pixels: inside the closed band `[low, high]` on every channel
//! it is homogeneous, a maximum channel deviation below `low` is saturated,
//! anything else is non-homogeneous. Selection prefers homogeneous blocks
//! (flattest first) and falls back to non-homogeneous (flattest first) and
//! then saturated (busiest first) blocks.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::image::{Image, Pixel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
    pub low: f64,
    pub high: f64,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("patch size and stride must be positive".into()));
        }
        if !(self.low >= 0.0 && self.low <= self.high && self.high.is_finite()) {
            return Err(Error::InvalidConfig("thresholds must satisfy 0 <= low <= high".into()));
        }
        Ok(())
    }
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { size: 128, stride: 32, low: 0.005, high: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Homogeneous,
    NonHomogeneous,
    Saturated,
}

/// Summary statistics of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileStats {
    /// `(row, col)` of the top-left pixel.
    pub origin: (usize, usize),
    pub channel_stds: [f64; 3],
    pub channel_means: [f64; 3],
    pub class: PatchClass,
}

impl TileStats {
    pub fn max_std(&self) -> f64 {
        self.channel_stds.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `3×size×size` values, channel-planar.
    pub values: Vec<f32>,
    pub size: usize,
    pub origin: (usize, usize),
    pub channel_stds: [f64; 3],
    pub channel_means: [f64; 3],
    pub class: Option<PatchClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub homogeneous: usize,
    pub non_homogeneous: usize,
    pub saturated: usize,
}

impl ClassCounts {
    fn bump(&mut self, c: PatchClass) {
        match c {
            PatchClass::Homogeneous => self.homogeneous += 1,
            PatchClass::NonHomogeneous => self.non_homogeneous += 1,
            PatchClass::Saturated => self.saturated += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.homogeneous + self.non_homogeneous + self.saturated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSelection {
    pub patches: Vec<Patch>,
    pub counts: ClassCounts,
    pub requested: usize,
}

fn check_size(width: usize, height: usize, size: usize) -> Result<()> {
    if width < size || height < size || size == 0 {
        return Err(Error::ImageTooSmall { width, height, size });
    }
    Ok(())
}

/// Top-left corners of every tile, row-major.
pub fn tile_origins(height: usize, width: usize, cfg: &PatchConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    check_size(width, height, cfg.size)?;
    let stride = cfg.stride;
    let rows = (height - cfg.size) / stride + 1;
    let cols = (width - cfg.size) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((r * stride, c * stride));
        }
    }
    Ok(out)
}

pub fn tile_count(height: usize, width: usize, cfg: &PatchConfig) -> usize {
    if height < cfg.size || width < cfg.size || cfg.size == 0 || cfg.stride == 0 {
        return 0;
    }
    ((height - cfg.size) / cfg.stride + 1) * ((width - cfg.size) / cfg.stride + 1)
}

/// Copies one tile out of the image as unit-scaled values.
pub fn extract_tile<P: Pixel>(img: &Image<P>, origin: (usize, usize), size: usize) -> Patch {
    let mut values = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = img.plane(c);
        for y in origin.0..origin.0 + size {
            let row = &plane[y * img.width() + origin.1..y * img.width() + origin.1 + size];
            values.extend(row.iter().map(|p| p.to_unit() as f32));
        }
    }
    Patch { values, size, origin, channel_stds: [0.0; 3], channel_means: [0.0; 3], class: None }
}

/// Every tile of the image, unclassified, row-major by origin.
pub fn tile_image<P: Pixel>(img: &Image<P>, cfg: &PatchConfig) -> Result<Vec<Patch>> {
    Ok(tile_origins(img.height(), img.width(), cfg)?
        .into_iter()
        .map(|o| extract_tile(img, o, cfg.size))
        .collect())
}

/// Two-pass population mean and standard deviation per channel, computed
/// directly from the image pixels in f64.
fn tile_moments<P: Pixel>(img: &Image<P>, origin: (usize, usize), size: usize) -> ([f64; 3], [f64; 3]) {
    let n = (size * size) as f64;
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for c in 0..3 {
        let plane = img.plane(c);
        let rows = || (origin.0..origin.0 + size).map(|y| &plane[y * img.width() + origin.1..][..size]);
        let mut s = 0.0;
        for row in rows() {
            for p in row {
                s += p.to_unit();
            }
        }
        let m = s / n;
        let mut v = 0.0;
        for row in rows() {
            for p in row {
                let d = p.to_unit() - m;
                v += d * d;
            }
        }
        means[c] = m;
        stds[c] = libm::sqrt(v / n);
    }
    (means, stds)
}

fn values_moments(values: &[f32], size: usize) -> ([f64; 3], [f64; 3]) {
    let n = size * size;
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for c in 0..3 {
        let ch = &values[c * n..(c + 1) * n];
        let m = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let v = ch.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / n as f64;
        means[c] = m;
        stds[c] = libm::sqrt(v);
    }
    (means, stds)
}

/// Class from channel standard deviations alone.
pub fn classify_stds(stds: &[f64; 3], cfg: &PatchConfig) -> PatchClass {
    let max = stds.iter().copied().fold(0.0, f64::max);
    if max < cfg.low {
        PatchClass::Saturated
    } else if stds.iter().all(|&s| s >= cfg.low && s <= cfg.high) {
        PatchClass::Homogeneous
    } else {
        PatchClass::NonHomogeneous
    }
}

/// Records channel statistics on the patch and returns its class.
pub fn classify_patch(p: &mut Patch, cfg: &PatchConfig) -> PatchClass {
    let (means, stds) = values_moments(&p.values, p.size);
    p.channel_means = means;
    p.channel_stds = stds;
    let class = classify_stds(&stds, cfg);
    p.class = Some(class);
    class
}

/// Subtracts each channel's mean from that channel.
pub fn preprocess_patch(mut p: Patch) -> Patch {
    let n = p.size * p.size;
    let (means, _) = values_moments(&p.values, p.size);
    for (c, &m) in means.iter().enumerate() {
        for v in &mut p.values[c * n..(c + 1) * n] {
            *v = (*v as f64 - m) as f32;
        }
    }
    p
}

/// Stats and classes of every tile, in selection order: homogeneous by
/// ascending max std, then non-homogeneous by ascending max std, then
/// saturated by descending max std. Ties keep row-major order.
pub fn rank_tiles<P: Pixel>(img: &Image<P>, cfg: &PatchConfig) -> Result<Vec<TileStats>> {
    let mut tiles: Vec<TileStats> = tile_origins(img.height(), img.width(), cfg)?
        .into_iter()
        .map(|origin| {
            let (channel_means, channel_stds) = tile_moments(img, origin, cfg.size);
            TileStats { origin, channel_stds, channel_means, class: classify_stds(&channel_stds, cfg) }
        })
        .collect();
    let group = |c: PatchClass| match c {
        PatchClass::Homogeneous => 0,
        PatchClass::NonHomogeneous => 1,
        PatchClass::Saturated => 2,
    };
    // stable sort keeps row-major order among equal keys
    tiles.sort_by(|a, b| {
        group(a.class).cmp(&group(b.class)).then_with(|| {
            let (x, y) = (a.max_std(), b.max_std());
            let ord = x.partial_cmp(&y).unwrap_or(Ordering::Equal);
            if a.class == PatchClass::Saturated {
                ord.reverse()
            } else {
                ord
            }
        })
    });
    Ok(tiles)
}

/// The first `p` ranked tiles, mean-subtracted. `seed` is accepted for
/// interface stability; the ranking is fully deterministic.
pub fn select_patches<P: Pixel>(img: &Image<P>, p: usize, _seed: u64, cfg: &PatchConfig) -> Result<PatchSelection> {
    if p == 0 {
        return Err(Error::ZeroPatchCount);
    }
    let ranked = rank_tiles(img, cfg)?;
    let mut counts = ClassCounts::default();
    let patches = ranked
        .iter()
        .take(p)
        .map(|t| {
            counts.bump(t.class);
            let mut patch = extract_tile(img, t.origin, cfg.size);
            patch.channel_stds = t.channel_stds;
            patch.channel_means = t.channel_means;
            patch.class = Some(t.class);
            preprocess_patch(patch)
        })
        .collect();
    Ok(PatchSelection { patches, counts, requested: p })
}

/// Mean-subtracted tile values written straight into `out`.
pub fn write_preprocessed<P: Pixel>(img: &Image<P>, origin: (usize, usize), size: usize, out: &mut [f32]) {
    let n = size * size;
    for c in 0..3 {
        let plane = img.plane(c);
        let dst = &mut out[c * n..(c + 1) * n];
        let mut k = 0;
        let mut s = 0.0f64;
        for y in origin.0..origin.0 + size {
            for p in &plane[y * img.width() + origin.1..][..size] {
                let v = p.to_unit() as f32;
                dst[k] = v;
                s += v as f64;
                k += 1;
            }
        }
        let m = s / n as f64;
        for v in dst.iter_mut() {
            *v = (*v as f64 - m) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn constant(h: usize, w: usize, v: u8) -> Image<u8> {
        Image::from_planes(w, h, vec![v; 3 * h * w]).unwrap()
    }

    #[test]
    fn single_tile() {
        let o = tile_origins(128, 128, &PatchConfig::default()).unwrap();
        assert_eq!(o, vec![(0, 0)]);
    }

    #[test]
    fn five_by_five_grid() {
        assert_eq!(tile_origins(256, 256, &PatchConfig::default()).unwrap().len(), 25);
        assert_eq!(tile_count(256, 256, &PatchConfig::default()), 25);
    }

    #[test]
    fn too_small_rejected() {
        let img = constant(127, 300, 0);
        assert!(matches!(tile_image(&img, &PatchConfig::default()), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn constant_patch_is_saturated() {
        let img = constant(128, 128, 90);
        let mut p = tile_image(&img, &PatchConfig::default()).unwrap().remove(0);
        assert_eq!(classify_patch(&mut p, &PatchConfig::default()), PatchClass::Saturated);
        assert_eq!(p.channel_stds, [0.0; 3]);
    }

    #[test]
    fn boundaries_are_homogeneous() {
        let cfg = PatchConfig::default();
        assert_eq!(classify_stds(&[0.01; 3], &cfg), PatchClass::Homogeneous);
        assert_eq!(classify_stds(&[0.005, 0.02, 0.01], &cfg), PatchClass::Homogeneous);
        assert_eq!(classify_stds(&[0.0049, 0.0049, 0.0049], &cfg), PatchClass::Saturated);
        assert_eq!(classify_stds(&[0.0049, 0.01, 0.01], &cfg), PatchClass::NonHomogeneous);
        assert_eq!(classify_stds(&[0.0201, 0.01, 0.01], &cfg), PatchClass::NonHomogeneous);
    }

    #[test]
    fn all_constant_image_selects_saturated() {
        let img = constant(256, 256, 40);
        let sel = select_patches(&img, 5, 0, &PatchConfig::default()).unwrap();
        assert_eq!(sel.patches.len(), 5);
        assert_eq!(sel.counts, ClassCounts { homogeneous: 0, non_homogeneous: 0, saturated: 5 });
        assert!(sel.patches.iter().all(|p| p.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_patch_count_rejected() {
        let img = constant(128, 128, 1);
        assert_eq!(select_patches(&img, 0, 0, &PatchConfig::default()).unwrap_err(), Error::ZeroPatchCount);
    }

    #[test]
    fn preprocess_constant_channel_goes_to_zero() {
        let mut planes = vec![0.25f32; 3 * 16];
        for (i, v) in planes[16..32].iter_mut().enumerate() {
            *v = i as f32 / 20.0;
        }
        let img = Image::from_planes(4, 4, planes).unwrap();
        let p = preprocess_patch(extract_tile(&img, (0, 0), 4));
        assert!(p.values[..16].iter().all(|&v| v == 0.0));
        let m: f64 = p.values[16..32].iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-6);
    }

    #[test]
    fn write_preprocessed_matches_preprocess() {
        let planes: Vec<u8> = (0..3 * 40 * 50).map(|i| ((i * 37) % 251) as u8).collect();
        let img = Image::from_planes(50, 40, planes).unwrap();
        let a = preprocess_patch(extract_tile(&img, (3, 7), 32));
        let mut b = vec![0.0f32; 3 * 32 * 32];
        write_preprocessed(&img, (3, 7), 32, &mut b);
        for (x, y) in a.values.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
