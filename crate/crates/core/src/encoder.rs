//! Tiny Vision Transformer mapping an image to a grid of patch features.

use rand::Rng;

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};

/// Number of trailing transformer blocks whose tokens form the grid.
pub const TAPPED_BLOCKS: usize = 4;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, patch_size: 8, depth: 6, width: 64, heads: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth < TAPPED_BLOCKS {
            return Err(Error::config(format!("encoder depth must be at least {TAPPED_BLOCKS}, got {}", self.depth)));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!("width {} is not divisible into {} heads", self.width, self.heads)));
        }
        Ok(())
    }

    /// Side length `g` of the patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Channels per grid cell: patch and class token from each tapped block.
    pub fn feature_dim(&self) -> usize {
        2 * TAPPED_BLOCKS * self.width
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    q_b: ParamId,
    v_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_g: ParamId,
    norm_b: ParamId,
}

/// Graph outputs of [`Encoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `g² × D`, row-major over the patch grid.
    pub grid: Var,
    /// `1 × D`, mean of the grid rows.
    pub pooled: Var,
}

/// Encoder output detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar = f32> {
    /// `g × g × D`
    pub grid: Tensor<T>,
    /// `D`
    pub pooled: Tensor<T>,
}

impl Encoder {
    /// Registers freshly initialized parameters under `prefix` in `store`.
    pub fn new<T: Scalar>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let p = cfg.patch_size;
        let normal = |shape: &[usize], rng: &mut _| trunc_normal::<T>(shape, INIT_STD, rng);
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}{name}"), t);

        let patch_w = add("patch.w", normal(&[p * p * 3, d], rng))?;
        let patch_b = add("patch.b", Tensor::zeros(&[d]))?;
        let cls = add("cls", normal(&[1, d], rng))?;
        let pos = add("pos", normal(&[cfg.tokens() + 1, d], rng))?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = |s: &str| format!("block{i}.{s}");
            blocks.push(Block {
                ln1_g: add(&name("ln1.g"), Tensor::full(&[d], T::one()))?,
                ln1_b: add(&name("ln1.b"), Tensor::zeros(&[d]))?,
                qkv_w: add(&name("qkv.w"), normal(&[d, 3 * d], rng))?,
                q_b: add(&name("q.b"), Tensor::zeros(&[d]))?,
                v_b: add(&name("v.b"), Tensor::zeros(&[d]))?,
                proj_w: add(&name("proj.w"), normal(&[d, d], rng))?,
                proj_b: add(&name("proj.b"), Tensor::zeros(&[d]))?,
                ln2_g: add(&name("ln2.g"), Tensor::full(&[d], T::one()))?,
                ln2_b: add(&name("ln2.b"), Tensor::zeros(&[d]))?,
                fc1_w: add(&name("fc1.w"), normal(&[d, 4 * d], rng))?,
                fc1_b: add(&name("fc1.b"), Tensor::zeros(&[4 * d]))?,
                fc2_w: add(&name("fc2.w"), normal(&[4 * d, d], rng))?,
                fc2_b: add(&name("fc2.b"), Tensor::zeros(&[d]))?,
            });
        }
        let norm_g = add("norm.g", Tensor::full(&[d], T::one()))?;
        let norm_b = add("norm.b", Tensor::zeros(&[d]))?;
        Ok(Self { cfg, patch_w, patch_b, cls, pos, blocks, norm_g, norm_b })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch_w
    }

    pub fn positional(&self) -> ParamId {
        self.pos
    }

    /// Rearranges an `S × S × 3` image into `g² × (p·p·3)` patch rows.
    pub fn patchify<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::contract(format!("encoder expects a {s}×{s}×3 image, got {:?}", image.shape())));
        }
        let p = self.cfg.patch_size;
        let gs = self.cfg.grid_side();
        let src = image.data();
        let mut out = Vec::with_capacity(s * s * 3);
        for pi in 0..gs {
            for pj in 0..gs {
                for di in 0..p {
                    let row = (pi * p + di) * s + pj * p;
                    out.extend_from_slice(&src[row * 3..(row + p) * 3]);
                }
            }
        }
        Tensor::new(vec![gs * gs, p * p * 3], out)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, image: &Tensor<T>) -> Result<EncoderVars> {
        let n = self.cfg.tokens();
        let d = self.cfg.width;
        let patches = g.constant(self.patchify(image)?);
        let emb = b.linear(g, patches, self.patch_w, self.patch_b)?;
        let tokens = g.concat(&[b.var(self.cls), emb], 0)?;
        let mut x = g.add(tokens, b.var(self.pos))?;

        let ones_col = g.constant(Tensor::full(&[n, 1], T::one()));
        let first_tapped = self.cfg.depth - TAPPED_BLOCKS;
        let mut parts = Vec::with_capacity(2 * TAPPED_BLOCKS);
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = b.layer_norm(g, x, blk.ln1_g, blk.ln1_b)?;
            // No key bias: softmax is invariant to it, so it would never train.
            let qkv = g.matmul(h, b.var(blk.qkv_w))?;
            let q = g.slice(qkv, 1, 0, d)?;
            let q = g.add_bias(q, b.var(blk.q_b))?;
            let k = g.slice(qkv, 1, d, d)?;
            let v = g.slice(qkv, 1, 2 * d, d)?;
            let v = g.add_bias(v, b.var(blk.v_b))?;
            let a = g.attention(q, k, v, self.cfg.heads)?;
            let a = b.linear(g, a, blk.proj_w, blk.proj_b)?;
            x = g.add(x, a)?;

            let h = b.layer_norm(g, x, blk.ln2_g, blk.ln2_b)?;
            let h = b.linear(g, h, blk.fc1_w, blk.fc1_b)?;
            let h = g.gelu(h);
            let h = b.linear(g, h, blk.fc2_w, blk.fc2_b)?;
            x = g.add(x, h)?;

            if i >= first_tapped {
                let normed = b.layer_norm(g, x, self.norm_g, self.norm_b)?;
                let cls = g.slice(normed, 0, 0, 1)?;
                let patch = g.slice(normed, 0, 1, n)?;
                let cls_rows = g.matmul(ones_col, cls)?;
                parts.push(patch);
                parts.push(cls_rows);
            }
        }
        let grid = g.concat(&parts, 1)?;
        let avg = g.constant(Tensor::full(&[1, n], T::of(1.0 / n as f64)));
        let pooled = g.matmul(avg, grid)?;
        Ok(EncoderVars { grid, pooled })
    }

    /// Forward pass without gradient tracking.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let out = self.forward(&mut g, &b, image)?;
        let gs = self.cfg.grid_side();
        let dim = self.cfg.feature_dim();
        let grid = g.value(out.grid).clone().reshape(&[gs, gs, dim])?;
        let pooled = g.value(out.pooled).clone().reshape(&[dim])?;
        Ok(FeatureMap { grid, pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::check_gradients;
    use crate::seeding;

    fn micro() -> EncoderConfig {
        EncoderConfig { image_size: 16, patch_size: 8, depth: 4, width: 8, heads: 2 }
    }

    fn random_image<T: Scalar>(s: usize, seed: u64) -> Tensor<T> {
        let mut rng = seeding::rng(seed, &[]);
        Tensor::from_fn(&[s, s, 3], |_| T::of(rng.gen::<f64>()))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { image_size: 60, ..Default::default() };
        assert!(bad.validate().is_err());
        let shallow = EncoderConfig { depth: 3, ..Default::default() };
        assert!(shallow.validate().is_err());
        assert_eq!(EncoderConfig::default().feature_dim(), 512);
        assert_eq!(EncoderConfig::default().grid_side(), 8);
    }

    #[test]
    fn output_shapes_and_pooling() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, "enc/", &mut seeding::rng(0, &[])).unwrap();
        let fm = enc.encode(&store, &random_image(64, 1)).unwrap();
        assert_eq!(fm.grid.shape(), &[8, 8, 512]);
        assert_eq!(fm.pooled.shape(), &[512]);
        assert!(fm.grid.all_finite());
        for c in [0, 100, 511] {
            let mean: f64 = (0..64).map(|i| fm.grid.data()[i * 512 + c] as f64).sum::<f64>() / 64.0;
            assert!((mean - fm.pooled.data()[c] as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(micro(), &mut store, "", &mut seeding::rng(0, &[])).unwrap();
        assert!(matches!(enc.encode(&store, &random_image(8, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_input_gives_position_independent_grid() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(micro(), &mut store, "", &mut seeding::rng(2, &[])).unwrap();
        let pos = enc.positional();
        *store.get_mut(pos) = Tensor::zeros(store.get(pos).shape());
        let fm = enc.encode(&store, &Tensor::zeros(&[16, 16, 3])).unwrap();
        let dim = micro().feature_dim();
        let rows: Vec<&[f32]> = fm.grid.data().chunks(dim).collect();
        for r in &rows[1..] {
            assert_eq!(*r, rows[0]);
        }
    }

    #[test]
    fn deterministic() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(micro(), &mut store, "", &mut seeding::rng(4, &[])).unwrap();
        let img = random_image(16, 9);
        assert_eq!(enc.encode(&store, &img).unwrap(), enc.encode(&store, &img).unwrap());
    }

    #[test]
    fn patchify_layout() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(micro(), &mut store, "", &mut seeding::rng(0, &[])).unwrap();
        let img = Tensor::<f64>::from_fn(&[16, 16, 3], |i| i as f64);
        let p = enc.patchify(&img).unwrap();
        assert_eq!(p.shape(), &[4, 192]);
        // Second patch starts at column 8 of row 0; its second row is image row 1.
        assert_eq!(p.data()[192], (8 * 3) as f64);
        assert_eq!(p.data()[192 + 24], ((16 + 8) * 3) as f64);
    }

    #[test]
    fn probe_loss_gradients_match_finite_differences() {
        // Some key-projection gradients are ~1e-7 against a loss near 1, so
        // their relative error is rounding-dominated below ~5e-5 and
        // truncation-dominated above ~3e-4.
        const STEP: f64 = 2e-4;
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(micro(), &mut store, "", &mut seeding::rng(5, &[])).unwrap();
        // Larger weights than the default init so every path carries signal.
        let mut rng = seeding::rng(6, &[]);
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let shape = store.get(id).shape().to_vec();
            let t: Tensor<f64> = trunc_normal(&shape, 0.3, &mut rng);
            *store.get_mut(id) = t;
        }
        let img = random_image::<f64>(16, 7);
        let points: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let err = check_gradients(
            |g, vars| {
                let bound = Bound(vars.to_vec());
                let out = enc.forward(g, &bound, &img)?;
                let w = g.constant(Tensor::from_fn(&[micro().feature_dim(), 3], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0));
                let logits = g.matmul(out.pooled, w)?;
                g.cross_entropy(logits, &[1])
            },
            &points,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
