//! On-disk formats: PNG images and raw `TPDM` depth maps.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const TPDM_MAGIC: &[u8; 4] = b"TPDM";

/// Writes an `h × w × 3` tensor with values in `[0, 1]` as 8-bit PNG.
pub fn write_png_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::contract(format!("expected h×w×3 image, got {s:?}"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes an `h × w` map as 8-bit grayscale, mapping `[lo, hi]` to `[0, 255]`.
pub fn write_png_gray(path: &Path, map: &Tensor<f32>, lo: f32, hi: f32) -> Result<()> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::contract(format!("expected h×w map, got {s:?}"))),
    };
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_u8((v - lo) / span)).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Reads an RGB PNG into an `h × w × 3` tensor with values in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Serializes an `h × w` depth map: magic, u32 width, u32 height, u32
/// reserved, then little-endian f32 values row by row.
pub fn encode_tpdm(depth: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *depth.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::contract(format!("expected h×w depth, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(TPDM_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in depth.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tpdm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != TPDM_MAGIC {
        return Err(Error::format(path, "missing TPDM header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    if w == 0 || h == 0 || bytes.len() != 16 + 4 * w * h {
        return Err(Error::format(path, format!("{w}×{h} depth map does not match file size")));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![h, w], data)
}

pub fn write_tpdm(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tpdm(depth)?).map_err(|e| Error::io(path, e))
}

pub fn read_tpdm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tpdm(&bytes, path)
}
