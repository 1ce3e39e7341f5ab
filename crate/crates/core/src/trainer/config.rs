use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::LossWeights;
use crate::renderer::{Camera, RenderSettings};
use crate::triplane::TriplaneConfig;

/// Every knob of a training run. Serializes to flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    /// Teacher checkpoint; empty when absent.
    pub teacher: PathBuf,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Caps the number of optimizer steps; zero means no cap.
    pub max_steps: u64,
    pub weights: LossWeights,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub render_res: usize,
    pub encoder: EncoderConfig,
    pub triplane: TriplaneConfig,
    pub mlp_hidden: usize,
    pub no_triplane: bool,
    pub no_dist: bool,
    pub from_scratch: bool,
    pub data_fraction: f64,
    pub augment: bool,
    /// Checkpoint period in steps; zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            teacher: PathBuf::new(),
            seed: 0,
            batch: 16,
            lr: 1e-4,
            epochs: 10,
            max_steps: 0,
            weights: LossWeights::default(),
            coarse_samples: 8,
            fine_samples: 8,
            render_res: 64,
            encoder: EncoderConfig::default(),
            triplane: TriplaneConfig::default(),
            mlp_hidden: 32,
            no_triplane: false,
            no_dist: false,
            from_scratch: false,
            data_fraction: 1.0,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

/// Keys accepted in config files, in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "data",
    "teacher",
    "seed",
    "batch",
    "lr",
    "epochs",
    "max_steps",
    "lambda_rgb",
    "lambda_depth",
    "lambda_dist",
    "lambda_norm",
    "coarse_samples",
    "fine_samples",
    "render_res",
    "image_size",
    "patch_size",
    "enc_depth",
    "enc_width",
    "enc_heads",
    "plane_low_res",
    "plane_res",
    "plane_channels",
    "emb_dim",
    "attn_heads",
    "mlp_hidden",
    "no_triplane",
    "no_dist",
    "from_scratch",
    "data_fraction",
    "augment",
    "checkpoint_every",
];

fn parse<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{v}` for key `{key}`"))),
    }
}

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = PathBuf::from(v),
            "teacher" => self.teacher = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "lambda_rgb" => self.weights.rgb = parse(key, v)?,
            "lambda_depth" => self.weights.depth = parse(key, v)?,
            "lambda_dist" => self.weights.dist = parse(key, v)?,
            "lambda_norm" => self.weights.norm = parse(key, v)?,
            "coarse_samples" => self.coarse_samples = parse(key, v)?,
            "fine_samples" => self.fine_samples = parse(key, v)?,
            "render_res" => self.render_res = parse(key, v)?,
            "image_size" => self.encoder.image_size = parse(key, v)?,
            "patch_size" => self.encoder.patch_size = parse(key, v)?,
            "enc_depth" => self.encoder.depth = parse(key, v)?,
            "enc_width" => self.encoder.width = parse(key, v)?,
            "enc_heads" => self.encoder.heads = parse(key, v)?,
            "plane_low_res" => self.triplane.low_res = parse(key, v)?,
            "plane_res" => self.triplane.res = parse(key, v)?,
            "plane_channels" => self.triplane.channels = parse(key, v)?,
            "emb_dim" => self.triplane.emb_dim = parse(key, v)?,
            "attn_heads" => self.triplane.heads = parse(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, v)?,
            "no_triplane" => self.no_triplane = parse_bool(key, v)?,
            "no_dist" => self.no_dist = parse_bool(key, v)?,
            "from_scratch" => self.from_scratch = parse_bool(key, v)?,
            "data_fraction" => self.data_fraction = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Text value of `key`.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data" => self.data.display().to_string(),
            "teacher" => self.teacher.display().to_string(),
            "seed" => self.seed.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "lambda_rgb" => self.weights.rgb.to_string(),
            "lambda_depth" => self.weights.depth.to_string(),
            "lambda_dist" => self.weights.dist.to_string(),
            "lambda_norm" => self.weights.norm.to_string(),
            "coarse_samples" => self.coarse_samples.to_string(),
            "fine_samples" => self.fine_samples.to_string(),
            "render_res" => self.render_res.to_string(),
            "image_size" => self.encoder.image_size.to_string(),
            "patch_size" => self.encoder.patch_size.to_string(),
            "enc_depth" => self.encoder.depth.to_string(),
            "enc_width" => self.encoder.width.to_string(),
            "enc_heads" => self.encoder.heads.to_string(),
            "plane_low_res" => self.triplane.low_res.to_string(),
            "plane_res" => self.triplane.res.to_string(),
            "plane_channels" => self.triplane.channels.to_string(),
            "emb_dim" => self.triplane.emb_dim.to_string(),
            "attn_heads" => self.triplane.heads.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "no_triplane" => self.no_triplane.to_string(),
            "no_dist" => self.no_dist.to_string(),
            "from_scratch" => self.from_scratch.to_string(),
            "data_fraction" => self.data_fraction.to_string(),
            "augment" => self.augment.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.triplane.validate()?;
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.coarse_samples == 0 {
            return Err(Error::config("coarse_samples must be positive"));
        }
        if self.render_res < 2 {
            return Err(Error::config("render_res must be at least 2"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("mlp_hidden must be positive"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction)));
        }
        if self.no_triplane {
            self.conv_upsample_blocks()?;
        }
        Ok(())
    }

    /// Weights actually applied: distillation is off for `no_dist` and
    /// `from_scratch` runs.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.no_dist || self.from_scratch {
            w.dist = 0.0;
        }
        w
    }

    pub fn uses_teacher_init(&self) -> bool {
        !self.from_scratch
    }

    pub fn render_settings(&self, seed: Option<u64>) -> RenderSettings {
        RenderSettings {
            res: self.render_res,
            coarse: self.coarse_samples,
            fine: self.fine_samples,
            seed,
            background: [0.0; 3],
        }
    }

    pub fn camera(&self) -> Camera {
        Camera::default()
    }

    /// Upsample blocks taking the patch grid to `render_res` in the
    /// convolutional decoder.
    pub fn conv_upsample_blocks(&self) -> Result<usize> {
        let g = self.encoder.grid_side();
        let mut side = g;
        let mut k = 0;
        while side < self.render_res {
            side *= 2;
            k += 1;
        }
        if side != self.render_res {
            return Err(Error::config(format!(
                "render_res {} is not the patch grid side {g} times a power of two",
                self.render_res
            )));
        }
        Ok(k)
    }
}
