//! Evaluation protocols: teacher pretraining, linear probing, shape bias,
//! robustness to appearance shifts, feature drift, and the ablation grid.

mod ablation;
mod probe;

use std::fmt;

use rand::Rng;
use rand_distr::Normal;

pub use ablation::{ablate, ablation_variants, AblationConfig, AblationRow, AblationTable, METRICS};
pub use probe::{probe_features, LinearProbe, ProbeConfig, ProbeResult};

use crate::diffmath::{Graph, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::imageops;
use crate::params::{fan_in_normal, ParamStore};
use crate::renderer::Camera;
use crate::scenegen::{render_scene, Item, ItemSpec, SHAPE_CLASSES, TEXTURE_CLASSES};
use crate::seeding;
use crate::trainer::{augment, Adam, FrozenEncoder, ENCODER_PREFIX};

use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), epochs: 10, batch: 16, lr: 1e-3, seed: 0, augment: true }
    }
}

/// Trains encoder plus a linear shape-class head on the training split with
/// cross-entropy on pooled features, then drops the head. `on_epoch`
/// receives the epoch and its mean loss.
pub fn pretrain_teacher(
    train: &[Item],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FrozenEncoder> {
    cfg.encoder.validate()?;
    if train.is_empty() || cfg.batch == 0 {
        return Err(Error::config("teacher pretraining needs items and a positive batch"));
    }
    let mut store = ParamStore::<f32>::new();
    let mut rng = seeding::rng(cfg.seed, &[1]);
    let encoder = Encoder::new(cfg.encoder.clone(), &mut store, ENCODER_PREFIX, &mut rng)?;
    let d = cfg.encoder.feature_dim();
    let head_w = store.add("head/w", fan_in_normal(&[d, SHAPE_CLASSES], d, &mut rng))?;
    let head_b = store.add("head/b", Tensor::zeros(&[SHAPE_CLASSES]))?;
    let mut adam = Adam::new(&store, cfg.lr);
    let s = cfg.encoder.image_size;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeding::rng(cfg.seed, &[2, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let scale = 1.0 / batch.len() as f32;
            let mut acc: Vec<Tensor<f32>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
            for &i in batch {
                let item = &train[i];
                let image = if cfg.augment {
                    let mut r = seeding::rng(cfg.seed, &[3, epoch as u64, item.spec.idx as u64]);
                    augment(&item.image, &item.depth, &mut r)?.0
                } else {
                    item.image.clone()
                };
                let input = imageops::resize(&image, s, s);
                let mut g = Graph::new();
                let b = store.bind(&mut g, true);
                let f = encoder.forward(&mut g, &b, &input)?;
                let logits = b.linear(&mut g, f.pooled, head_w, head_b)?;
                let loss = g.cross_entropy(logits, &[item.spec.shape_class])?;
                epoch_loss += g.value(loss).item() as f64 / train.len() as f64;
                let grads = g.backward(loss)?;
                for (a, id) in acc.iter_mut().zip(store.ids()) {
                    if let Some(gr) = grads.get(b.var(id)) {
                        for (x, &y) in a.data_mut().iter_mut().zip(gr.data()) {
                            *x += scale * y;
                        }
                    }
                }
            }
            adam.step(&mut store, &acc)?;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite { op: format!("teacher loss in epoch {epoch}") });
        }
        on_epoch(epoch, epoch_loss);
    }
    FrozenEncoder::from_store(&cfg.encoder, &store)
}

/// Pooled features of each image, widened to `f64`.
pub fn pooled_features<'a>(
    encoder: &FrozenEncoder,
    images: impl IntoIterator<Item = &'a Tensor<f32>>,
) -> Result<Vec<Vec<f64>>> {
    images.into_iter().map(|img| Ok(encoder.pooled(img)?.to_f64_vec())).collect()
}

pub fn shape_labels(items: &[Item]) -> Vec<usize> {
    items.iter().map(|it| it.spec.shape_class).collect()
}

/// Probes pooled features for the shape class: fit on `train`, score on
/// `val`.
pub fn linear_probe(
    encoder: &FrozenEncoder,
    train: &[Item],
    val: &[Item],
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeResult)> {
    let tx = pooled_features(encoder, train.iter().map(|it| &it.image))?;
    let vx = pooled_features(encoder, val.iter().map(|it| &it.image))?;
    probe_features((&tx, &shape_labels(train)), (&vx, &shape_labels(val)), SHAPE_CLASSES, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeBiasResult {
    pub shape_matches: usize,
    pub texture_matches: usize,
    pub other: usize,
    /// `shape / (shape + texture)`; `None` when both counts are zero.
    pub bias: Option<f64>,
}

impl ShapeBiasResult {
    pub fn from_counts(shape_matches: usize, texture_matches: usize, other: usize) -> Self {
        let decided = shape_matches + texture_matches;
        Self {
            shape_matches,
            texture_matches,
            other,
            bias: (decided > 0).then(|| shape_matches as f64 / decided as f64),
        }
    }

    /// Tallies predictions against each item's shape and texture labels.
    pub fn from_predictions(predictions: &[usize], items: &[ItemSpec]) -> Self {
        let (mut s, mut t, mut o) = (0, 0, 0);
        for (&p, it) in predictions.iter().zip(items) {
            if p == it.shape_class {
                s += 1;
            } else if p == it.texture_class {
                t += 1;
            } else {
                o += 1;
            }
        }
        Self::from_counts(s, t, o)
    }

    pub fn total(&self) -> usize {
        self.shape_matches + self.texture_matches + self.other
    }
}

impl fmt::Display for ShapeBiasResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bias {
            Some(b) => write!(f, "{b:.4}")?,
            None => write!(f, "undefined")?,
        }
        write!(f, " (shape {}, texture {}, other {})", self.shape_matches, self.texture_matches, self.other)
    }
}

/// Classifies every cue-conflict item with the probe.
pub fn shape_bias(encoder: &FrozenEncoder, probe: &LinearProbe, cue_conflict: &[Item]) -> Result<ShapeBiasResult> {
    let x = pooled_features(encoder, cue_conflict.iter().map(|it| &it.image))?;
    let preds: Vec<usize> = x.iter().map(|r| probe.predict(r)).collect();
    let specs: Vec<ItemSpec> = cue_conflict.iter().map(|it| it.spec.clone()).collect();
    Ok(ShapeBiasResult::from_predictions(&preds, &specs))
}

/// Appearance shifts applied to held-out scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Identity,
    /// Re-renders the scene with a different texture class.
    TextureSwap,
    Grayscale,
    /// Additive per-pixel Gaussian noise, σ = 0.1, clamped to `[0, 1]`.
    ColorNoise,
}

impl Perturbation {
    pub const SHIFTS: [Perturbation; 3] =
        [Perturbation::TextureSwap, Perturbation::Grayscale, Perturbation::ColorNoise];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::TextureSwap => "texture_swap",
            Perturbation::Grayscale => "grayscale",
            Perturbation::ColorNoise => "color_noise",
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "identity" | "none" => Ok(Perturbation::Identity),
            "texture_swap" => Ok(Perturbation::TextureSwap),
            "grayscale" => Ok(Perturbation::Grayscale),
            "color_noise" => Ok(Perturbation::ColorNoise),
            _ => Err(Error::config(format!(
                "unknown perturbation `{s}` (expected identity, texture-swap, grayscale or color-noise)"
            ))),
        }
    }
}

pub const COLOR_NOISE_STD: f64 = 0.1;

/// Texture class used by the swap shift for `spec`: never its current one.
pub fn swapped_texture(spec: &ItemSpec, seed: u64) -> usize {
    let mut rng = seeding::rng(seed, &[6, spec.idx as u64]);
    (spec.texture_class + rng.gen_range(1..TEXTURE_CLASSES)) % TEXTURE_CLASSES
}

/// Perturbed copy of the item image, quantized to 8 bits like stored data.
pub fn perturb(item: &Item, p: Perturbation, seed: u64, camera: &Camera) -> Result<Tensor<f32>> {
    let res = item.image.shape()[0];
    let mut img = match p {
        Perturbation::Identity => return Ok(item.image.clone()),
        Perturbation::TextureSwap => {
            let spec = ItemSpec { texture_class: swapped_texture(&item.spec, seed), ..item.spec.clone() };
            render_scene(&spec.scene()?, camera, res)?.0
        }
        Perturbation::Grayscale => imageops::grayscale(&item.image),
        Perturbation::ColorNoise => {
            let mut rng = seeding::rng(seed, &[7, item.spec.idx as u64]);
            let normal = Normal::new(0.0, COLOR_NOISE_STD).expect("positive std");
            let mut img = item.image.clone();
            for v in img.data_mut() {
                *v += rng.sample(normal) as f32;
            }
            img
        }
    };
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(img)
}

/// Probe accuracy on perturbed copies of `items`.
pub fn robustness_eval(
    encoder: &FrozenEncoder,
    probe: &LinearProbe,
    items: &[Item],
    p: Perturbation,
    seed: u64,
    camera: &Camera,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Undefined("robustness on an empty split".into()));
    }
    let images = items.iter().map(|it| perturb(it, p, seed, camera)).collect::<Result<Vec<_>>>()?;
    let x = pooled_features(encoder, &images)?;
    let hits = x.iter().zip(items).filter(|(r, it)| probe.predict(r) == it.spec.shape_class).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Mean over items of the per-element mean squared difference between the
/// two encoders' grids.
pub fn feature_drift(student: &FrozenEncoder, teacher: &FrozenEncoder, items: &[Item]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Undefined("feature drift over no items".into()));
    }
    let mut total = 0.0;
    for it in items {
        let a = student.grid(&it.image)?;
        let b = teacher.grid(&it.image)?;
        if a.shape() != b.shape() {
            return Err(Error::contract("student and teacher grids differ in shape"));
        }
        let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        total += sq / a.numel() as f64;
    }
    Ok(total / items.len() as f64)
}
