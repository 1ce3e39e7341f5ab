//! Triplane decoder and point queries against the three feature planes.

use rand::Rng;

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, trunc_normal, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriplaneConfig {
    /// Side `r` of the learned embedding planes.
    pub low_res: usize,
    /// Side `R` of the decoded planes.
    pub res: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub heads: usize,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        Self { low_res: 8, res: 32, channels: 32, emb_dim: 64, heads: 4 }
    }
}

impl TriplaneConfig {
    /// Number of upsample blocks `k` with `res = low_res · 2^k`.
    pub fn upsample_blocks(&self) -> Result<usize> {
        let mut side = self.low_res;
        let mut k = 0;
        while side < self.res && side > 0 {
            side *= 2;
            k += 1;
        }
        if self.low_res == 0 || side != self.res || k == 0 {
            return Err(Error::config(format!(
                "plane resolution {} is not {} times a positive power of two",
                self.res, self.low_res
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        self.upsample_blocks()?;
        if self.channels == 0 || self.heads == 0 || !self.emb_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embedding width {} is not divisible into {} heads",
                self.emb_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Three `R × R × C` feature planes, in XY, XZ, YZ order.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<T: Scalar = f32> {
    pub planes: [Tensor<T>; 3],
}

impl<T: Scalar> Triplane<T> {
    pub fn new(planes: [Tensor<T>; 3]) -> Result<Self> {
        let shape = planes[0].shape().to_vec();
        let ok = matches!(shape[..], [r1, r2, c] if r1 == r2 && r1 >= 2 && c >= 1);
        if !ok || planes.iter().any(|p| p.shape() != shape.as_slice()) {
            return Err(Error::contract("triplane planes must share one R×R×C shape"));
        }
        Ok(Self { planes })
    }

    pub fn zeros(res: usize, channels: usize) -> Self {
        let z = Tensor::zeros(&[res, res, channels]);
        Self { planes: [z.clone(), z.clone(), z] }
    }

    pub fn res(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[2]
    }

    /// Summed plane features at `n × 3` points.
    pub fn query(&self, points: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let planes = self.planes.clone().map(|p| g.constant(p));
        let pts = g.constant(points.clone());
        let out = query_features(&mut g, &planes, pts)?;
        Ok(g.value(out).clone())
    }
}

/// Projects `n × 3` points onto the XY, XZ and YZ planes, dropping the
/// orthogonal coordinate.
pub fn project<T: Scalar>(g: &mut Graph<T>, points: Var) -> Result<[Var; 3]> {
    if !matches!(g.shape(points), [_, 3]) {
        return Err(Error::contract(format!("points must be n×3, got {:?}", g.shape(points))));
    }
    let xy = g.slice(points, 1, 0, 2)?;
    let x = g.slice(points, 1, 0, 1)?;
    let z = g.slice(points, 1, 2, 1)?;
    let xz = g.concat(&[x, z], 1)?;
    let yz = g.slice(points, 1, 1, 2)?;
    Ok([xy, xz, yz])
}

/// Bilinearly samples each plane at the projected points and sums the three.
pub fn query_features<T: Scalar>(g: &mut Graph<T>, planes: &[Var; 3], points: Var) -> Result<Var> {
    let coords = project(g, points)?;
    let mut acc = g.bilinear_sample(planes[0], coords[0])?;
    for p in 1..3 {
        let f = g.bilinear_sample(planes[p], coords[p])?;
        acc = g.add(acc, f)?;
    }
    Ok(acc)
}

/// Cross-attends learned plane embeddings to the image grid, then upsamples
/// them into a [`Triplane`].
#[derive(Clone, Debug)]
pub struct TriplaneDecoder {
    cfg: TriplaneConfig,
    feature_dim: usize,
    xi: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    to_planes_w: ParamId,
    to_planes_b: ParamId,
    up: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

impl TriplaneDecoder {
    /// `feature_dim` is the channel count of the encoder grid.
    pub fn new<T: Scalar>(
        cfg: TriplaneConfig,
        feature_dim: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.emb_dim;
        let c = cfg.channels;
        let r = cfg.low_res;
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}{name}"), t);
        let xi = add("xi", trunc_normal(&[3 * r * r, e], 1.0, rng))?;
        let ln_g = add("ln.g", Tensor::full(&[e], T::one()))?;
        let ln_b = add("ln.b", Tensor::zeros(&[e]))?;
        let wq = add("q.w", fan_in_normal(&[e, e], e, rng))?;
        let bq = add("q.b", Tensor::zeros(&[e]))?;
        let wk = add("k.w", fan_in_normal(&[feature_dim, e], feature_dim, rng))?;
        let wv = add("v.w", fan_in_normal(&[feature_dim, e], feature_dim, rng))?;
        let bv = add("v.b", Tensor::zeros(&[e]))?;
        let wo = add("o.w", fan_in_normal(&[e, e], e, rng))?;
        let bo = add("o.b", Tensor::zeros(&[e]))?;
        let to_planes_w = add("planes.w", fan_in_normal(&[e, c], e, rng))?;
        let to_planes_b = add("planes.b", Tensor::zeros(&[c]))?;
        let mut up = Vec::new();
        for i in 0..cfg.upsample_blocks()? {
            let w = add(&format!("up{i}.w"), fan_in_normal(&[3, 3, c, c], 9 * c, rng))?;
            let b = add(&format!("up{i}.b"), Tensor::zeros(&[c]))?;
            up.push((w, b));
        }
        let out_w = add("out.w", fan_in_normal(&[3, 3, c, c], 9 * c, rng))?;
        let out_b = add("out.b", Tensor::zeros(&[c]))?;
        Ok(Self {
            cfg,
            feature_dim,
            xi,
            ln_g,
            ln_b,
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            to_planes_w,
            to_planes_b,
            up,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TriplaneConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> ParamId {
        self.xi
    }

    pub fn output_conv(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    pub fn value_projection(&self) -> (ParamId, ParamId) {
        (self.wv, self.bv)
    }

    /// Multi-head attention of the normalized embeddings over the grid rows,
    /// before the output projection. Returns `3r² × emb_dim`.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, grid: Var) -> Result<Var> {
        if !matches!(g.shape(grid), [_, d] if *d == self.feature_dim) {
            return Err(Error::contract(format!(
                "decoder expects n×{} grid features, got {:?}",
                self.feature_dim,
                g.shape(grid)
            )));
        }
        let h = b.layer_norm(g, b.var(self.xi), self.ln_g, self.ln_b)?;
        let q = b.linear(g, h, self.wq, self.bq)?;
        let k = g.matmul(grid, b.var(self.wk))?;
        let v = b.linear(g, grid, self.wv, self.bv)?;
        g.attention(q, k, v, self.cfg.heads)
    }

    /// Decodes an `n × D` grid into three `R × R × C` plane variables.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, grid: Var) -> Result<[Var; 3]> {
        let r = self.cfg.low_res;
        let c = self.cfg.channels;
        let a = self.attend(g, b, grid)?;
        let a = b.linear(g, a, self.wo, self.bo)?;
        let x = g.add(b.var(self.xi), a)?;
        let low = b.linear(g, x, self.to_planes_w, self.to_planes_b)?;
        let mut planes = Vec::with_capacity(3);
        for p in 0..3 {
            let rows = g.slice(low, 0, p * r * r, r * r)?;
            let mut y = g.reshape(rows, &[r, r, c])?;
            for &(w, bias) in &self.up {
                y = g.upsample2x(y)?;
                y = g.conv3x3(y, b.var(w), b.var(bias))?;
                y = g.gelu(y);
            }
            planes.push(g.conv3x3(y, b.var(self.out_w), b.var(self.out_b))?);
        }
        Ok([planes[0], planes[1], planes[2]])
    }

    /// Forward pass without gradient tracking; `grid` is `n × D` or `g × g × D`.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, grid: &Tensor<T>) -> Result<Triplane<T>> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let rows = grid.numel() / self.feature_dim.max(1);
        let h = g.constant(grid.clone().reshape(&[rows, self.feature_dim])?);
        let planes = self.forward(&mut g, &b, h)?;
        Triplane::new(planes.map(|p| g.value(p).clone()))
    }
}
