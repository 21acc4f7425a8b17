//! 8-bit PNG and ascii PPM (P3) images.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::model::Image;

/// Linear `[0, 1]` to 8 bits with rounding.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

fn rgb_bytes(img: &Image) -> Result<Vec<u8>> {
    match img.channels {
        3 => Ok(img.data.iter().map(|v| to_u8(*v)).collect()),
        1 => Ok(img.data.iter().flat_map(|v| [to_u8(*v); 3]).collect()),
        c => Err(Error::Format(format!("cannot encode a {c}-channel image"))),
    }
}

/// PNG bytes; single-channel images become grayscale.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => {
            let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
            enc.write_image(&bytes, w, h, ExtendedColorType::L8)?
        }
        _ => enc.write_image(&rgb_bytes(img)?, w, h, ExtendedColorType::Rgb8)?,
    }
    Ok(out)
}

/// Ascii PPM (`P3`, maxval 255); single-channel images are replicated to RGB.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Ascii))
        .write_image(&rgb_bytes(img)?, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)?;
    Ok(out)
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") => Ok(ImageFormat::Pnm),
        other => Err(Error::Format(format!("unsupported image extension {other:?}; use .png or .ppm"))),
    }
}

pub fn encode_image(img: &Image, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Png => encode_png(img),
        ImageFormat::Pnm => encode_ppm(img),
        f => Err(Error::Format(format!("unsupported image format {f:?}"))),
    }
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_image(img, format_of(path)?)?)?;
    Ok(())
}

/// Decodes PNG or PPM bytes; grayscale stays single-channel, alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let dynamic = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format()?.decode()?;
    Ok(match dynamic {
        DynamicImage::ImageLuma8(g) => gray_to_image(&g),
        other => rgb_to_image(&other.to_rgb8()),
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    format_of(path)?;
    decode_image(&std::fs::read(path)?)
}

fn gray_to_image(g: &GrayImage) -> Image {
    Image {
        width: g.width() as usize,
        height: g.height() as usize,
        channels: 1,
        data: g.as_raw().iter().map(|v| from_u8(*v)).collect(),
    }
}

fn rgb_to_image(rgb: &RgbImage) -> Image {
    Image {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        channels: 3,
        data: rgb.as_raw().iter().map(|v| from_u8(*v)).collect(),
    }
}
