//! 8-bit RGB PNG conversion.

use std::fs;
use std::path::Path;

use image::RgbImage;

use super::Image;
use crate::error::{Error, Result};
use hazekit_tape::Tensor;

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rgb = image::load_from_memory(&bytes)?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Quantizes a single `[1, 3, H, W]` image, rounding half to even.
pub fn to_rgb8(img: &Image) -> Result<RgbImage> {
    let [n, c, h, w] = img.dims4();
    if n != 1 || c != 3 {
        return Err(Error::Dimension(format!("expected a single RGB image, got {:?}", img.shape())));
    }
    let plane = h * w;
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from the image"))
}

pub fn quantize(v: f32) -> u8 {
    round_level(v as f64 * 255.0)
}

fn round_level(level: f64) -> u8 {
    level.clamp(0.0, 255.0).round_ties_even() as u8
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
