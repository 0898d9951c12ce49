//! Image decoding and PNG encoding.

use std::path::Path;

use hcb_core::image::Image;

use crate::{Error, Result};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// Decodes any supported format to 8-bit RGB.
pub fn load_rgb8(path: &Path) -> Result<Image<u8>> {
    let rgb = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_interleaved(w as usize, h as usize, rgb.as_raw())?)
}

/// Writes `img` as PNG, creating parent directories.
pub fn save_png(path: &Path, img: &Image<u8>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::Error::io(dir))?;
    }
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_interleaved())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(image_err(path))
}

/// `(width, height)` from the file header.
pub fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(image_err(path))
}
