//! PNG storage: 8-bit RGB images in `[0,1]` and 16-bit depth maps in
//! `[0,1]` scene units.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Limits, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted side length when decoding.
pub const MAX_SIDE: u32 = 4096;

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), reason: e.to_string() }
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(256 * 1024 * 1024);
    reader.limits(limits);
    reader.decode().map_err(|e| codec_err(path, e))
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes a PNG into a `3×H×W` tensor. Non-RGB inputs are converted.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor> {
    decode_rgb_at(bytes, Path::new("<memory>"))
}

fn decode_rgb_at(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let img = decode(bytes, path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let hw = h * w;
    Tensor::new(vec![3, h, w], (0..3 * hw).map(|i| {
        let (c, p) = (i / hw, i % hw);
        raw[p * 3 + c] as f64 / 255.0
    }).collect())
}

pub fn encode_rgb(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::shape("encode_rgb", format!("expected 3×H×W, got {:?}", img.shape())));
    };
    let hw = h * w;
    let d = img.data();
    let raw: Vec<u8> = (0..3 * hw).map(|i| quantize8(d[(i % 3) * hw + i / 3])).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches dims");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| codec_err(Path::new("<memory>"), e))?;
    Ok(out)
}

/// Decodes a 16-bit grayscale PNG into an `H×W` depth map in `[0,1]`.
pub fn decode_depth(bytes: &[u8]) -> Result<Tensor> {
    decode_depth_at(bytes, Path::new("<memory>"))
}

fn decode_depth_at(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let img = decode(bytes, path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![h, w], img.as_raw().iter().map(|&v| v as f64 / 65535.0).collect())
}

pub fn encode_depth(depth: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *depth.shape() else {
        return Err(Error::shape("encode_depth", format!("expected H×W, got {:?}", depth.shape())));
    };
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size matches dims");
    let mut out = Vec::new();
    DynamicImage::ImageLuma16(buf)
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| codec_err(Path::new("<memory>"), e))?;
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| codec_err(path, e))?;
    decode_rgb_at(&bytes, path)
}

pub fn write_rgb(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_rgb(img)?)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| codec_err(path, e))?;
    decode_depth_at(&bytes, path)
}

pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_depth(depth)?)?;
    Ok(())
}
