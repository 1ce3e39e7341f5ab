use rand::Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::imageops;

pub const MIN_CROP_SCALE: f64 = 0.8;
pub const FLIP_PROBABILITY: f64 = 0.5;

/// One sampled geometric transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    /// Side of the square crop window.
    pub side: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        Self { top: 0, left: 0, side: size, flip: false }
    }

    /// Square crop with side scale in `[0.8, 1]`, uniform position, and a
    /// fair-coin flip.
    pub fn sample(size: usize, rng: &mut impl Rng) -> Self {
        let scale = rng.gen_range(MIN_CROP_SCALE..=1.0);
        let side = ((scale * size as f64).round() as usize).clamp(1, size);
        let top = rng.gen_range(0..=size - side);
        let left = rng.gen_range(0..=size - side);
        let flip = rng.gen_bool(FLIP_PROBABILITY);
        Self { top, left, side, flip }
    }
}

/// Applies the same crop, resize back to full size, and flip to the image
/// and its depth map.
pub fn apply(image: &Tensor<f32>, depth: &Tensor<f32>, p: &AugmentParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if image.shape().len() != 3 || depth.shape() != [h, w] {
        return Err(Error::contract(format!(
            "augment needs an h×w×3 image and matching h×w depth, got {:?} and {:?}",
            image.shape(),
            depth.shape()
        )));
    }
    if p.top + p.side > h || p.left + p.side > w {
        return Err(Error::contract("crop window outside image"));
    }
    let mut img = imageops::resize(&imageops::crop(image, p.top, p.left, p.side, p.side), h, w);
    let mut dep = imageops::resize(&imageops::crop(depth, p.top, p.left, p.side, p.side), h, w);
    if p.flip {
        img = imageops::hflip(&img);
        dep = imageops::hflip(&dep);
    }
    Ok((img, dep))
}

/// Samples a transform for a square image and applies it.
pub fn augment(image: &Tensor<f32>, depth: &Tensor<f32>, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let p = AugmentParams::sample(image.shape()[0].min(image.shape()[1]), rng);
    apply(image, depth, &p)
}
