//! 8-bit image files. PNG, PGM and PPM are chosen by extension.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::scene::Image;

/// Grayscale files load as one channel, anything else as RGB.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_)
    );
    if gray {
        let data = img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(w, h, 1, data)
    } else {
        let data = img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(w, h, 3, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::InvalidValue(format!(
            "{}: image extension must be png, pgm or ppm",
            path.display()
        ))),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let format = format_for(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("size matches"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("size matches"))
    };
    let mut buf = Cursor::new(Vec::new());
    dynamic.write_to(&mut buf, format)?;
    write_atomic(path, &buf.into_inner())
}

/// Writes a validity mask as a black/white grayscale image.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_image(path, &Image::new(width, height, 1, data)?)
}
