use rand::Rng;

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::objective::{self, LossReport, LossTerms, LossWeights};
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::renderer::{render_graph, Camera, RadianceMlp, RenderSettings};
use crate::triplane::TriplaneDecoder;

use super::config::TrainConfig;

pub const ENCODER_PREFIX: &str = "enc/";

/// Image-space decoder used when the triplane is ablated: upsample and
/// convolve the patch grid straight to color and depth.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    feature_dim: usize,
    grid_side: usize,
    input: (ParamId, ParamId),
    up: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl ConvDecoder {
    pub fn new<T: Scalar>(
        cfg: &TrainConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.encoder.feature_dim();
        let c = cfg.triplane.channels;
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}{name}"), t);
        let input = (add("in.w", fan_in_normal(&[3, 3, d, c], 9 * d, rng))?, add("in.b", Tensor::zeros(&[c]))?);
        let mut up = Vec::new();
        for i in 0..cfg.conv_upsample_blocks()? {
            up.push((
                add(&format!("up{i}.w"), fan_in_normal(&[3, 3, c, c], 9 * c, rng))?,
                add(&format!("up{i}.b"), Tensor::zeros(&[c]))?,
            ));
        }
        let out = (add("out.w", fan_in_normal(&[3, 3, c, 4], 9 * c, rng))?, add("out.b", Tensor::zeros(&[4]))?);
        Ok(Self { feature_dim: d, grid_side: cfg.encoder.grid_side(), input, up, out })
    }

    /// Returns `(image, depth)` at `grid_side · 2^k`, depth squashed into
    /// the camera's `[near, far]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, grid: Var, camera: &Camera) -> Result<(Var, Var)> {
        let s = self.grid_side;
        let x = g.reshape(grid, &[s, s, self.feature_dim])?;
        let x = g.conv3x3(x, b.var(self.input.0), b.var(self.input.1))?;
        let mut x = g.gelu(x);
        for &(w, bias) in &self.up {
            x = g.upsample2x(x)?;
            x = g.conv3x3(x, b.var(w), b.var(bias))?;
            x = g.gelu(x);
        }
        let raw = g.conv3x3(x, b.var(self.out.0), b.var(self.out.1))?;
        let res = g.shape(raw)[0];
        let rgb = g.slice(raw, 2, 0, 3)?;
        let image = g.sigmoid(rgb);
        let d = g.slice(raw, 2, 3, 1)?;
        let d = g.reshape(d, &[res, res])?;
        let d = g.sigmoid(d);
        let d = g.scale(d, camera.far - camera.near);
        let near = g.constant(Tensor::full(&[res, res], T::of(camera.near)));
        let depth = g.add(d, near)?;
        Ok((image, depth))
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Triplane { planes: TriplaneDecoder, mlp: RadianceMlp },
    Conv(ConvDecoder),
}

/// Parameter layout of the student: encoder under `enc/`, then either the
/// triplane decoder (`dec/`) with radiance MLP (`mlp/`), or the conv decoder
/// (`conv/`).
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Graph outputs for one image.
#[derive(Clone, Copy, Debug)]
pub struct ItemVars {
    pub grid: Var,
    pub pooled: Var,
    pub image: Var,
    pub depth: Var,
    /// Sampled densities; absent for the conv decoder.
    pub sigma: Option<Var>,
}

/// Network inputs and reconstruction targets of one item.
#[derive(Clone, Debug)]
pub struct Prepared<T: Scalar> {
    /// Encoder input, `S × S × 3`.
    pub input: Tensor<T>,
    /// `R × R × 3` at render resolution.
    pub target_rgb: Tensor<T>,
    /// `R × R`
    pub target_depth: Tensor<T>,
}

impl Model {
    pub fn new<T: Scalar>(cfg: &TrainConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), store, ENCODER_PREFIX, rng)?;
        let decoder = if cfg.no_triplane {
            Decoder::Conv(ConvDecoder::new(cfg, store, "conv/", rng)?)
        } else {
            let planes = TriplaneDecoder::new(cfg.triplane.clone(), cfg.encoder.feature_dim(), store, "dec/", rng)?;
            let mlp = RadianceMlp::new(cfg.triplane.channels, cfg.mlp_hidden, store, "mlp/", rng)?;
            Decoder::Triplane { planes, mlp }
        };
        Ok(Self { encoder, decoder })
    }

    /// Encode, decode and render one image.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: &Tensor<T>,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<ItemVars> {
        let enc = self.encoder.forward(g, b, input)?;
        match &self.decoder {
            Decoder::Triplane { planes, mlp } => {
                let p = planes.forward(g, b, enc.grid)?;
                let out = render_graph(g, &p, mlp, b, camera, settings)?;
                Ok(ItemVars {
                    grid: enc.grid,
                    pooled: enc.pooled,
                    image: out.image,
                    depth: out.depth,
                    sigma: Some(out.sigma),
                })
            }
            Decoder::Conv(conv) => {
                let (image, depth) = conv.forward(g, b, enc.grid, camera)?;
                Ok(ItemVars { grid: enc.grid, pooled: enc.pooled, image, depth, sigma: None })
            }
        }
    }

    /// Builds the weighted objective for one item. `teacher_grid` is the
    /// frozen teacher's `g² × F` output and is only consulted when the
    /// distillation weight is nonzero.
    #[allow(clippy::too_many_arguments)]
    pub fn item_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        item: &Prepared<T>,
        teacher_grid: Option<&Tensor<T>>,
        weights: &LossWeights,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<(Var, LossReport)> {
        let out = self.forward(g, b, &item.input, camera, settings)?;
        let t_rgb = g.constant(item.target_rgb.clone());
        let t_depth = g.constant(item.target_depth.clone());
        let rgb = objective::rgb_loss(g, t_rgb, out.image)?;
        let depth = objective::depth_loss(g, t_depth, out.depth)?;
        let dist = match teacher_grid {
            Some(t) if weights.dist > 0.0 => {
                let t = g.constant(t.clone());
                Some(objective::distillation_loss(g, out.grid, t)?)
            }
            _ => None,
        };
        let norm = match out.sigma {
            Some(s) => Some(objective::density_norm_loss(g, s)?),
            None => None,
        };
        objective::total_loss(g, &LossTerms { rgb, depth, dist, norm }, weights)
    }
}
