//! Joint optimization of encoder, plane embeddings, decoder and radiance MLP
//! against reconstruction, depth, distillation and density losses.

mod adam;
mod augment;
mod checkpoint;
mod config;
mod model;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use augment::{apply as apply_augment, augment, AugmentParams, FLIP_PROBABILITY, MIN_CROP_SCALE};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use model::{ConvDecoder, Decoder, ItemVars, Model, Prepared, ENCODER_PREFIX};

use crate::diffmath::{Graph, Tensor};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::imageops;
use crate::objective::LossReport;
use crate::params::ParamStore;
use crate::scenegen::{Dataset, Item};
use crate::seeding;

const STREAM_INIT: u64 = 1;
const STREAM_SELECT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_RENDER: u64 = 5;

pub const METRICS_HEADER: &str = "step,epoch,rgb,depth,dist,norm,total,wall_ms";

/// Config keys that may change between a checkpoint and its resumption.
const RESUMABLE_KEYS: &[&str] = &["data", "teacher", "epochs", "max_steps", "checkpoint_every"];

/// An encoder with fixed weights, used as the distillation teacher and for
/// evaluating trained students.
#[derive(Debug)]
pub struct FrozenEncoder {
    encoder: Encoder,
    store: ParamStore<f32>,
    calls: AtomicUsize,
}

impl Clone for FrozenEncoder {
    fn clone(&self) -> Self {
        Self { encoder: self.encoder.clone(), store: self.store.clone(), calls: AtomicUsize::new(0) }
    }
}

impl FrozenEncoder {
    /// Copies the `enc/` tensors of `store`.
    pub fn from_store(cfg: &EncoderConfig, store: &ParamStore<f32>) -> Result<Self> {
        let mut own = ParamStore::new();
        let encoder = Encoder::new(cfg.clone(), &mut own, ENCODER_PREFIX, &mut seeding::rng(0, &[]))?;
        let copied = own.copy_prefix(store, ENCODER_PREFIX)?;
        if copied != own.len() {
            return Err(Error::config(format!("encoder needs {} tensors, found {copied}", own.len())));
        }
        Ok(Self { encoder, store: own, calls: AtomicUsize::new(0) })
    }

    /// Reads the encoder part of any checkpoint written by this crate; its
    /// shape comes from the checkpoint's config echo.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ck.config)?;
        let mut own = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder, &mut own, ENCODER_PREFIX, &mut seeding::rng(0, &[]))?;
        ck.fill_store(&mut own, "")?;
        Ok(Self { encoder, store: own, calls: AtomicUsize::new(0) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Checkpoint holding only the encoder, with its shape keys as config.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let cfg = TrainConfig { encoder: self.encoder.config().clone(), ..Default::default() };
        let mut config = String::new();
        for key in ["image_size", "patch_size", "enc_depth", "enc_width", "enc_heads"] {
            let _ = writeln!(config, "{key} = {}", cfg.get(key).expect("known key"));
        }
        let mut ck = Checkpoint { step, config, tensors: Vec::new() };
        ck.push_store(&self.store, "");
        ck
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn encode(&self, image: &Tensor<f32>) -> Result<FeatureMap<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = self.encoder.config().image_size;
        if image.shape()[..2] != [s, s] {
            return self.encoder.encode(&self.store, &imageops::resize(image, s, s));
        }
        self.encoder.encode(&self.store, image)
    }

    /// Grid features flattened to `g² × F`.
    pub fn grid(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let f = self.encode(image)?;
        let rows = self.encoder.config().tokens();
        f.grid.reshape(&[rows, self.encoder.config().feature_dim()])
    }

    pub fn pooled(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.encode(image)?.pooled)
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn sha256(&self) -> [u8; 32] {
        self.store.sha256()
    }
}

/// Resolves the teacher for `cfg`: absent for from-scratch runs, required
/// otherwise, and checked against the student's encoder shape.
pub fn init_teacher(cfg: &TrainConfig, teacher: Option<FrozenEncoder>) -> Result<Option<FrozenEncoder>> {
    if cfg.from_scratch {
        return Ok(None);
    }
    let t = teacher
        .ok_or_else(|| Error::config("a teacher checkpoint is required (set `teacher`), unless from_scratch = true"))?;
    if t.config() != &cfg.encoder {
        return Err(Error::config(format!(
            "teacher encoder {:?} does not match the configured encoder {:?}",
            t.config(),
            cfg.encoder
        )));
    }
    Ok(Some(t))
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub report: LossReport,
}

/// Training state over an in-memory dataset.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    store: ParamStore<f32>,
    adam: Adam,
    teacher: Option<FrozenEncoder>,
    items: Vec<Item>,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset, teacher: Option<FrozenEncoder>) -> Result<Self> {
        cfg.validate()?;
        let teacher = init_teacher(&cfg, teacher)?;
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store, &mut seeding::rng(cfg.seed, &[STREAM_INIT]))?;
        if let Some(t) = &teacher {
            store.copy_prefix(&t.store, ENCODER_PREFIX)?;
        }
        let items = select_items(dataset.train(), cfg.data_fraction, cfg.seed)?;
        let adam = Adam::new(&store, cfg.lr);
        Ok(Self { cfg, model, store, adam, teacher, items, step: 0 })
    }

    /// Restores parameters, optimizer moments and step from `ck`.
    pub fn resume(
        cfg: TrainConfig,
        dataset: &Dataset,
        teacher: Option<FrozenEncoder>,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let saved = TrainConfig::from_text(&ck.config)?;
        for key in CONFIG_KEYS.iter().filter(|k| !RESUMABLE_KEYS.contains(k)) {
            if saved.get(key) != cfg.get(key) {
                return Err(Error::config(format!(
                    "cannot resume: `{key}` is {} in the checkpoint but {} now",
                    saved.get(key).unwrap_or_default(),
                    cfg.get(key).unwrap_or_default()
                )));
            }
        }
        let mut t = Self::new(cfg, dataset, teacher)?;
        ck.fill_store(&mut t.store, "")?;
        ck.fill_store(&mut t.adam.m, "adam.m/")?;
        ck.fill_store(&mut t.adam.v, "adam.v/")?;
        t.adam.t = ck.step;
        t.step = ck.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn teacher(&self) -> Option<&FrozenEncoder> {
        self.teacher.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Training items in use after `data_fraction` selection.
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.items.len().div_ceil(self.cfg.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.epochs as u64 * self.steps_per_epoch();
        if self.cfg.max_steps > 0 {
            full.min(self.cfg.max_steps)
        } else {
            full
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// The student's encoder as a frozen copy.
    pub fn student_encoder(&self) -> Result<FrozenEncoder> {
        FrozenEncoder::from_store(&self.cfg.encoder, &self.store)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint { step: self.step, config: self.cfg.to_text(), tensors: Vec::new() };
        ck.push_store(&self.store, "");
        ck.push_store(&self.adam.m, "adam.m/");
        ck.push_store(&self.adam.v, "adam.v/");
        ck
    }

    /// Epoch and item indices of the batch for `step`.
    pub fn batch_for(&self, step: u64) -> (u64, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut seeding::rng(self.cfg.seed, &[STREAM_SHUFFLE, epoch]));
        let b = self.cfg.batch;
        let end = ((pos + 1) * b).min(order.len());
        (epoch, order[pos * b..end].to_vec())
    }

    /// Augments and resizes one item. The transform depends only on the
    /// seed, epoch and item index.
    pub fn prepare(&self, item: &Item, epoch: u64) -> Result<Prepared<f32>> {
        let (image, depth) = if self.cfg.augment {
            let mut rng = seeding::rng(self.cfg.seed, &[STREAM_AUGMENT, epoch, item.spec.idx as u64]);
            augment(&item.image, &item.depth, &mut rng)?
        } else {
            (item.image.clone(), item.depth.clone())
        };
        let s = self.cfg.encoder.image_size;
        let r = self.cfg.render_res;
        Ok(Prepared {
            input: imageops::resize(&image, s, s),
            target_rgb: imageops::resize(&image, r, r),
            target_depth: imageops::resize(&depth, r, r),
        })
    }

    /// Mean loss and gradient over the given items, in parameter order.
    pub fn batch_gradients(&self, batch: &[usize], epoch: u64, step: u64) -> Result<(Vec<Tensor<f32>>, LossReport)> {
        let weights = self.cfg.effective_weights();
        let camera = self.cfg.camera();
        let scale = 1.0 / batch.len() as f32;
        let mut acc: Vec<Tensor<f32>> = self.store.ids().map(|id| Tensor::zeros(self.store.get(id).shape())).collect();
        let mut report = LossReport::default();
        for (slot, &i) in batch.iter().enumerate() {
            let prep = self.prepare(&self.items[i], epoch)?;
            let teacher_grid = match &self.teacher {
                Some(t) if weights.dist > 0.0 => Some(t.grid(&prep.input)?),
                _ => None,
            };
            let settings =
                self.cfg.render_settings(Some(seeding::derive(self.cfg.seed, &[STREAM_RENDER, step, slot as u64])));
            let mut g = Graph::new();
            let b = self.store.bind(&mut g, true);
            let (loss, rep) =
                self.model.item_loss(&mut g, &b, &prep, teacher_grid.as_ref(), &weights, &camera, &settings)?;
            report.add_scaled(&rep, 1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            for (a, id) in acc.iter_mut().zip(self.store.ids()) {
                if let Some(gr) = grads.get(b.var(id)) {
                    for (x, &y) in a.data_mut().iter_mut().zip(gr.data()) {
                        *x += scale * y;
                    }
                }
            }
        }
        Ok((acc, report))
    }

    /// Runs one optimizer step. On a non-finite loss or gradient nothing is
    /// updated and the error is returned.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (epoch, batch) = self.batch_for(step);
        let (grads, report) = self.batch_gradients(&batch, epoch, step)?;
        if !report.is_finite() {
            return Err(Error::NonFinite { op: format!("loss at step {step}") });
        }
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(StepLog { step, epoch, report })
    }
}

fn select_items(train: &[Item], fraction: f64, seed: u64) -> Result<Vec<Item>> {
    let k = (fraction * train.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::config(format!(
            "data_fraction {fraction} of {} training items selects nothing",
            train.len()
        )));
    }
    if k == train.len() {
        return Ok(train.to_vec());
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut seeding::rng(seed, &[STREAM_SELECT]));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| train[i].clone()).collect())
}

/// A student restored from a checkpoint for inference.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl TrainedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_text(&ck.config)?;
        let mut store = ParamStore::new();
        let model = Model::new(&config, &mut store, &mut seeding::rng(0, &[]))?;
        ck.fill_store(&mut store, "")?;
        Ok(Self { config, model, store })
    }

    /// Reconstructs `(image, depth)` at the configured render resolution.
    /// `seed` jitters ray samples; `None` uses bin midpoints.
    pub fn reconstruct(&self, image: &Tensor<f32>, seed: Option<u64>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let s = self.config.encoder.image_size;
        let input = imageops::resize(image, s, s);
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let out = self.model.forward(&mut g, &b, &input, &self.config.camera(), &self.config.render_settings(seed))?;
        Ok((g.value(out.image).clone(), g.value(out.depth).clone()))
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub logs: Vec<StepLog>,
}

fn metrics_row(log: &StepLog, wall_ms: u128) -> String {
    let r = &log.report;
    format!("{},{},{},{},{},{},{},{wall_ms}", log.step, log.epoch, r.rgb, r.depth, r.dist, r.norm, r.total)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the trainer to completion, calling `on_step` after each step.
///
/// Writes `config.cfg`, `metrics.csv`, periodic `ckpt_<step>.tpck` plus
/// `last.tpck`, and `final.tpck` under `out`. A failing step leaves the
/// pre-step state in `last_good.tpck`.
pub fn run(trainer: &mut Trainer, out: &Path, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.cfg"), &trainer.config().to_text())?;
    let metrics_path = out.join("metrics.csv");
    let start = trainer.step();
    let mut rows = vec![METRICS_HEADER.to_string()];
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            rows.extend(
                old.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < start))
                    .map(str::to_string),
            );
        }
    }
    let flush = |rows: &[String]| write_text(&metrics_path, &(rows.join("\n") + "\n"));
    let clock = Instant::now();
    let mut logs = Vec::new();
    while !trainer.is_done() {
        let log = match trainer.train_step() {
            Ok(log) => log,
            Err(e) => {
                trainer.checkpoint().save(&out.join("last_good.tpck"))?;
                flush(&rows)?;
                return Err(e);
            }
        };
        rows.push(metrics_row(&log, clock.elapsed().as_millis()));
        on_step(&log);
        logs.push(log);
        let every = trainer.config().checkpoint_every;
        if every > 0 && trainer.step().is_multiple_of(every) && !trainer.is_done() {
            let ck = trainer.checkpoint();
            ck.save(&out.join(format!("ckpt_{:06}.tpck", trainer.step())))?;
            ck.save(&out.join("last.tpck"))?;
            flush(&rows)?;
        }
    }
    flush(&rows)?;
    let final_checkpoint = out.join("final.tpck");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, steps: trainer.step(), logs })
}

/// Loads the dataset and teacher named in `cfg`, optionally resumes from a
/// checkpoint, and trains into `out`.
pub fn train(
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.data)?;
    let teacher = if cfg.from_scratch || cfg.teacher.as_os_str().is_empty() {
        None
    } else {
        Some(FrozenEncoder::load(&cfg.teacher)?)
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &dataset, teacher, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), &dataset, teacher)?,
    };
    run(&mut trainer, out, on_step)
}

#[cfg(test)]
mod tests;
