//! PNG and TIFF reading and writing at 8 or 16 bits per sample.

use std::fs;
use std::path::{Path, PathBuf};

use crossfuse_core::{ColorSpace, ImageSample};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::{CliError, CliResult};

pub const SUPPORTED_FORMATS: &str = "PNG (.png), TIFF (.tif, .tiff)";

fn format_of(path: &Path) -> CliResult<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "tif" | "tiff" => Ok(ImageFormat::Tiff),
        _ => Err(CliError::data(anyhow::anyhow!(
            "unsupported image format for {}; supported formats: {SUPPORTED_FORMATS}",
            path.display()
        ))),
    }
}

pub fn is_supported(path: &Path) -> bool {
    format_of(path).is_ok()
}

fn samples<T: Copy + Into<f64>>(raw: &[T]) -> Vec<f64> {
    raw.iter().map(|&v| v.into()).collect()
}

/// Decodes an image; alpha channels are dropped.
pub fn read_image(path: &Path) -> CliResult<ImageSample> {
    let format = format_of(path)?;
    let bytes = fs::read(path).map_err(|e| CliError::data(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| CliError::data(anyhow::anyhow!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (depth, space, pixels) = match img {
        DynamicImage::ImageLuma8(b) => (8, ColorSpace::Gray, samples(b.as_raw())),
        DynamicImage::ImageLuma16(b) => (16, ColorSpace::Gray, samples(b.as_raw())),
        DynamicImage::ImageRgb8(b) => (8, ColorSpace::Rgb, samples(b.as_raw())),
        DynamicImage::ImageRgb16(b) => (16, ColorSpace::Rgb, samples(b.as_raw())),
        DynamicImage::ImageLumaA8(_) => (8, ColorSpace::Gray, samples(img.to_luma8().as_raw())),
        DynamicImage::ImageLumaA16(_) => (16, ColorSpace::Gray, samples(img.to_luma16().as_raw())),
        DynamicImage::ImageRgba8(_) => (8, ColorSpace::Rgb, samples(img.to_rgb8().as_raw())),
        DynamicImage::ImageRgba16(_) => (16, ColorSpace::Rgb, samples(img.to_rgb16().as_raw())),
        other => {
            return Err(CliError::data(anyhow::anyhow!(
                "{}: unsupported sample type {:?}; expected 8- or 16-bit integer samples",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(ImageSample::new(w, h, depth, space, pixels)?)
}

/// Encodes gray or RGB samples (YCbCr is converted to RGB first).
pub fn write_image(path: &Path, img: &ImageSample) -> CliResult<()> {
    let format = format_of(path)?;
    let rgb;
    let img = if img.color_space == ColorSpace::YCbCr {
        rgb = img.to_ycbcr().to_rgb(img.modality.clone());
        &rgb
    } else {
        img
    };
    let (w, h) = (img.width as u32, img.height as u32);
    let bad = || CliError::data(anyhow::anyhow!("pixel buffer does not match {w}x{h}"));
    let dynamic = match (img.bit_depth, img.color_space) {
        (8, ColorSpace::Gray) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.pixels.iter().map(|&v| v as u8).collect()).ok_or_else(bad)?,
        ),
        (16, ColorSpace::Gray) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.pixels.iter().map(|&v| v as u16).collect()).ok_or_else(bad)?,
        ),
        (8, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.pixels.iter().map(|&v| v as u8).collect()).ok_or_else(bad)?,
        ),
        _ => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, img.pixels.iter().map(|&v| v as u16).collect()).ok_or_else(bad)?,
        ),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    dynamic
        .save_with_format(path, format)
        .map_err(|e| CliError::data(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

/// Supported image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::data(anyhow::anyhow!("cannot open directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && is_supported(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
