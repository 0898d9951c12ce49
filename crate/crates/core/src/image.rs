//! Planar RGB images.

use alloc::vec::Vec;

use crate::{Error, Result};

/// A pixel sample that can be mapped to the unit interval.
pub trait Pixel: Copy + Send + Sync {
    fn to_unit(self) -> f64;
}

impl Pixel for u8 {
    #[inline]
    fn to_unit(self) -> f64 {
        self as f64 / 255.0
    }
}

impl Pixel for u16 {
    #[inline]
    fn to_unit(self) -> f64 {
        self as f64 / 65535.0
    }
}

impl Pixel for f32 {
    #[inline]
    fn to_unit(self) -> f64 {
        self as f64
    }
}

impl Pixel for f64 {
    #[inline]
    fn to_unit(self) -> f64 {
        self
    }
}

/// Three-channel image stored plane by plane (`[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<P> {
    width: usize,
    height: usize,
    planes: Vec<P>,
}

impl<P: Pixel> Image<P> {
    pub fn from_planes(width: usize, height: usize, planes: Vec<P>) -> Result<Self> {
        if planes.len() != 3 * width * height {
            return Err(Error::ShapeMismatch {
                op: "image",
                detail: alloc::format!("{}x{}x3 needs {} samples, got {}", height, width, 3 * width * height, planes.len()),
            });
        }
        Ok(Self { width, height, planes })
    }

    /// Builds from interleaved `RGBRGB…` samples.
    pub fn from_interleaved(width: usize, height: usize, rgb: &[P]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::ShapeMismatch {
                op: "image",
                detail: alloc::format!("{}x{}x3 needs {} samples, got {}", height, width, 3 * width * height, rgb.len()),
            });
        }
        let n = width * height;
        let mut planes = Vec::with_capacity(3 * n);
        for c in 0..3 {
            planes.extend(rgb.iter().skip(c).step_by(3).copied());
        }
        Ok(Self { width, height, planes })
    }

    pub fn to_interleaved(&self) -> Vec<P> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(self.planes[c * n + i]);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[P] {
        let n = self.width * self.height;
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> &[P] {
        &self.planes
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> P {
        self.planes[(c * self.height + y) * self.width + x]
    }
}
