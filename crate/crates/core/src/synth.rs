//! Deterministic synthetic multi-camera dataset.
//!
//! Every image is a smooth scene plus a per-model periodic high-frequency
//! signature, a weak per-device multiplicative pattern and white noise,
//! quantized to 8 bits. The signature period divides the tile stride, so
//! every tile sees the signature at the same phase.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::hcbnet::BrandSpec;
use crate::image::Image;
use crate::manifest::{ImageRecord, Manifest};
use crate::{rng, Error, Result};

/// Side of the periodic model signature.
pub const PERIOD: usize = 8;
/// Device patterns are this many times weaker than model signatures.
pub const DEVICE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBrand {
    pub name: String,
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub brands: Vec<SynthBrand>,
    pub devices_per_model: usize,
    pub images_per_device: usize,
    pub width: usize,
    pub height: usize,
    /// Peak-to-peak amplitude of the scene's low-frequency variation.
    pub scene_variation: f64,
    /// RMS of the model signature on the unit pixel scale.
    pub signature_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let brand = |name: &str, models| SynthBrand { name: name.into(), models };
        Self {
            brands: vec![brand("Arden", 1), brand("Brisa", 2), brand("Corvo", 2), brand("Delta", 2)],
            devices_per_model: 2,
            images_per_device: 40,
            width: 256,
            height: 256,
            scene_variation: 0.03,
            signature_strength: 0.008,
            noise_std: 0.003,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::InvalidConfig(alloc::format!("synth: {r}")));
        if self.brands.is_empty() || self.devices_per_model == 0 || self.images_per_device == 0 {
            return bad("every count must be at least 1");
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image size");
        }
        for (i, b) in self.brands.iter().enumerate() {
            if b.models == 0 {
                return bad("every brand needs a model");
            }
            if b.name.is_empty() || b.name.contains(['_', '/', '\\']) || b.name.starts_with('.') {
                return bad("brand names must be non-empty and free of '_' and path separators");
            }
            if self.brands[..i].iter().any(|o| o.name == b.name) {
                return bad("duplicate brand name");
            }
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.scene_variation) || !finite_nonneg(self.signature_strength) || !finite_nonneg(self.noise_std) {
            return bad("amplitudes must be finite and non-negative");
        }
        Ok(())
    }

    pub fn model_names(&self, brand: usize) -> Vec<String> {
        let b = &self.brands[brand];
        let initial: String = b.name.chars().take(1).flat_map(char::to_uppercase).collect();
        (0..b.models).map(|m| alloc::format!("{initial}{}", (m + 1) * 10)).collect()
    }

    pub fn hierarchy(&self) -> Vec<BrandSpec> {
        (0..self.brands.len())
            .map(|b| BrandSpec { brand: self.brands[b].name.clone(), models: self.model_names(b) })
            .collect()
    }

    pub fn n_models(&self) -> usize {
        self.brands.iter().map(|b| b.models).sum()
    }

    pub fn n_images(&self) -> usize {
        self.n_models() * self.devices_per_model * self.images_per_device
    }

    /// Records in generation order: brand, model, device, image.
    pub fn records(&self) -> Vec<ImageRecord> {
        let mut out = Vec::with_capacity(self.n_images());
        for (b, brand) in self.brands.iter().enumerate() {
            for model in self.model_names(b) {
                for d in 0..self.devices_per_model {
                    for i in 0..self.images_per_device {
                        out.push(ImageRecord {
                            path: alloc::format!("{}_{model}_{d}_{i}.png", brand.name),
                            brand: brand.name.clone(),
                            model: model.clone(),
                            device_index: d as u32,
                            image_id: alloc::format!("{i}"),
                            width: self.width as u32,
                            height: self.height as u32,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn manifest(&self) -> Result<Manifest> {
        self.validate()?;
        Manifest::new(self.records())
    }
}

/// Zero-mean, unit-RMS `3×P×P` pattern of the `index`-th model.
pub fn signature(seed: u64, index: usize) -> Vec<f64> {
    let mut r = rng::rng_for(seed, &alloc::format!("signature/{index}"));
    let mut s: Vec<f64> = (0..3 * PERIOD * PERIOD).map(|_| StandardNormal.sample(&mut r)).collect();
    for plane in s.chunks_exact_mut(PERIOD * PERIOD) {
        let m = plane.iter().sum::<f64>() / plane.len() as f64;
        plane.iter_mut().for_each(|v| *v -= m);
    }
    let rms = libm::sqrt(s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64);
    s.iter_mut().for_each(|v| *v /= rms);
    s
}

/// Renders one image. `model_index` is the model's position in the
/// flattened model list and selects its signature.
pub fn render(spec: &SynthSpec, model_index: usize, device: usize, image: usize) -> Image<u8> {
    let (w, h) = (spec.width, spec.height);
    let sig = signature(spec.seed, model_index);
    let image_seed = rng::derive(
        spec.seed,
        ((model_index * spec.devices_per_model + device) * spec.images_per_device + image) as u64,
    );
    let mut r = rng::rng(image_seed);
    let mut dev = rng::rng_for(spec.seed, &alloc::format!("device/{model_index}/{device}"));

    // scene: base colour, linear gradient and one broad cosine per channel
    let mut params = [[0.0f64; 6]; 3];
    for p in &mut params {
        *p = [
            r.random_range(0.3..0.7),
            r.random_range(-0.5..0.5),
            r.random_range(-0.5..0.5),
            r.random_range(0.0..core::f64::consts::TAU),
            r.random_range(0.5..1.5),
            r.random_range(0.5..1.5),
        ];
    }
    let amp = spec.scene_variation;
    let dev_amp = spec.signature_strength / DEVICE_RATIO;
    let mut planes = vec![0u8; 3 * w * h];
    for c in 0..3 {
        let [base, gx, gy, phase, fx, fy] = params[c];
        for y in 0..h {
            let v = y as f64 / h as f64;
            for x in 0..w {
                let u = x as f64 / w as f64;
                let scene = base
                    + amp * 0.5 * (gx * u + gy * v)
                    + amp * 0.25 * libm::cos(core::f64::consts::PI * (fx * u + fy * v) + phase);
                let prnu: f64 = StandardNormal.sample(&mut dev);
                let noise: f64 = StandardNormal.sample(&mut r);
                let s = sig[c * PERIOD * PERIOD + (y % PERIOD) * PERIOD + x % PERIOD];
                let value = scene * (1.0 + dev_amp * 2.0 * prnu) + spec.signature_strength * s + spec.noise_std * noise;
                planes[c * w * h + y * w + x] = libm::round(value.clamp(0.0, 1.0) * 255.0) as u8;
            }
        }
    }
    Image::from_planes(w, h, planes).expect("plane length")
}

/// A manifest record with its pixels.
pub type LabeledImage = (ImageRecord, Image<u8>);

/// Every record with its rendered image, in [`SynthSpec::records`] order.
pub fn generate(spec: &SynthSpec) -> Result<(Manifest, Vec<LabeledImage>)> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_images());
    let mut model_index = 0;
    let records = spec.records();
    let mut it = records.into_iter();
    for b in &spec.brands {
        for _ in 0..b.models {
            for d in 0..spec.devices_per_model {
                for i in 0..spec.images_per_device {
                    let rec = it.next().expect("record per image");
                    out.push((rec, render(spec, model_index, d, i)));
                }
            }
            model_index += 1;
        }
    }
    Ok((spec.manifest()?, out))
}

/// Non-learned oracle: folds a mean-subtracted `3×S×S` patch onto one
/// signature period and returns the flattened model index whose signature
/// correlates best. `origin` gives the patch's phase in the image.
pub fn correlate_signature(seed: u64, n_models: usize, patch: &[f32], size: usize, origin: (usize, usize)) -> usize {
    let mut folded = vec![0.0f64; 3 * PERIOD * PERIOD];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let py = (origin.0 + y) % PERIOD;
                let px = (origin.1 + x) % PERIOD;
                folded[c * PERIOD * PERIOD + py * PERIOD + px] += patch[c * size * size + y * size + x] as f64;
            }
        }
    }
    let mut best = (0, f64::NEG_INFINITY);
    for m in 0..n_models {
        let score: f64 = signature(seed, m).iter().zip(&folded).map(|(s, f)| s * f).sum();
        if score > best.1 {
            best = (m, score);
        }
    }
    best.0
}
