//! Differentiable primitives. Each forward method validates its inputs,
//! computes the value eagerly and records what the backward rule needs.

use super::graph::{GradBufs, Graph, Var};
use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const EXP_CLAMP: f64 = 80.0;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
        cols: usize,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Exp {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Relu {
        x: Var,
    },
    /// Keeps the inner `tanh` of the forward pass for the backward pass.
    Gelu {
        x: Var,
        t: Vec<T>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        col: Vec<T>,
    },
    Upsample2x {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Mae {
        a: Var,
        b: Var,
    },
    BilinearSample {
        plane: Var,
        coords: Var,
        r: usize,
        c: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        d: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        k: usize,
        probs: Vec<T>,
    },
    Composite {
        sigma: Var,
        rgb: Var,
        t: Vec<T>,
        far: T,
        background: [T; 3],
        samples: usize,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Affine { .. } => "affine",
            Op::Exp { .. } => "exp",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Upsample2x { .. } => "upsample2x",
            Op::Mse { .. } => "mse",
            Op::Mae { .. } => "mae",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Composite { .. } => "composite",
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let y = if x > T::of(20.0) { x } else { x.exp().ln_1p() };
    y.max(T::zero())
}

/// `tanh(k·(x + c·x³))` through one `exp`, which is much cheaper than `tanh`.
#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp_fast() + T::one())
}

#[inline]
fn gelu_grad_from<T: Scalar>(x: T, t: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let three = T::of(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

/// Front-to-back compositing of one ray.
///
/// `sigma` holds `n` densities, `rgb` `3n` colors, `t` the `n` sorted sample
/// depths. Interval lengths are `t[i+1] - t[i]`, with `far - t[n-1]` for the
/// last sample. Returns the blended color, expected depth, per-sample weights
/// and the residual transmittance.
pub fn composite_ray<T: Scalar>(sigma: &[T], rgb: &[T], t: &[T], far: T, background: [T; 3]) -> ([T; 3], T, Vec<T>, T) {
    let n = t.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { far };
        let delta = next - t[i];
        let decay = (-(sigma[i] * delta)).exp();
        let w = trans * (T::one() - decay);
        for ch in 0..3 {
            color[ch] += w * rgb[3 * i + ch];
        }
        depth += w * t[i];
        weights.push(w);
        trans *= decay;
    }
    for ch in 0..3 {
        color[ch] += trans * background[ch];
    }
    depth += trans * far;
    (color, depth, weights, trans)
}

fn check_sorted<T: Scalar>(t: &[T], far: T) -> Result<()> {
    for w in t.windows(2) {
        if w[1] < w[0] {
            return Err(Error::contract("composite: sample depths must be sorted ascending"));
        }
    }
    if let Some(&last) = t.last() {
        if last > far {
            return Err(Error::contract("composite: sample depth beyond far plane"));
        }
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, x: Var, value: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, value), op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!("{what}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::contract(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::contract(format!("matmul: inner dims {k} vs {k2}")));
        }
        let c = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul { a, b, m, k, n }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, value), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.value(b).numel() != cols {
            return Err(Error::contract(format!(
                "add_bias: bias of {} elements for last axis {cols}",
                self.value(b).numel()
            )));
        }
        let bias = self.data(b).to_vec();
        let mut value = self.data(x).to_vec();
        for row in value.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(b);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, value), Op::AddBias { x, b, cols }, rg))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let value = self.data(x).iter().map(|&v| s * v + c).collect();
        self.unary(x, value, Op::Affine { x, scale: s })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise exponential; inputs above 80 are clamped first.
    pub fn exp(&mut self, x: Var) -> Var {
        let cap = T::of(EXP_CLAMP);
        let value = self.data(x).iter().map(|&v| v.min(cap).exp()).collect();
        self.unary(x, value, Op::Exp { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, value, Op::Sigmoid { x })
    }

    /// `ln(1 + eˣ)`, never below zero.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| softplus(v)).collect();
        self.unary(x, value, Op::Softplus { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.unary(x, value, Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t: Vec<T> = self.data(x).iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::of(0.5);
        let value = self.data(x).iter().zip(&t).map(|(&v, &tv)| half * v * (T::one() + tv)).collect();
        self.unary(x, value, Op::Gelu { x, t })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let value = kernels::softmax_rows(self.data(x), cols);
        self.unary(x, value, Op::Softmax { x, cols })
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::contract("layer_norm: gain/shift size differs from last axis"));
        }
        let (value, xhat, rstd) = kernels::layer_norm_rows(self.data(x), self.data(gamma), self.data(beta), cols);
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, value), Op::LayerNorm { x, gamma, beta, cols, xhat, rstd }, rg))
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s / n), Op::Mean { x }, rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::contract(format!("concat: incompatible shapes {base:?} and {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.data(p);
                value.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::from_parts(shape, value), Op::Concat { parts: parts.to_vec(), sizes, outer, inner }, rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(format!("slice: range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let d = self.data(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * axis_len + start) * inner;
            value.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(out_shape, value), Op::Slice { x, outer, inner, axis_len, start, len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value.with_requires_grad(false), Op::Reshape { x }, rg))
    }

    /// 3×3 convolution, stride 1, zero padding 1, on an `h × w × cin` image.
    /// Weights are `[3, 3, cin, cout]`, bias `[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::contract(format!("conv3x3: input must be h×w×c, got {s:?}"))),
        };
        let cout = match *self.shape(w) {
            [3, 3, ci, co] if ci == cin => co,
            ref s => {
                return Err(Error::contract(format!("conv3x3: weight {s:?} incompatible with {cin} input channels")))
            }
        };
        if self.value(b).numel() != cout {
            return Err(Error::contract("conv3x3: bias size differs from output channels"));
        }
        let col = kernels::im2col3x3(self.data(x), h, wd, cin);
        let mut out = vec![T::zero(); h * wd * cout];
        let bias = self.data(b);
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        kernels::matmul_acc(&col, self.data(w), &mut out, h * wd, 9 * cin, cout);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(Tensor::from_parts(vec![h, wd, cout], out), Op::Conv3x3 { x, w, b, h, wd, cin, cout, col }, rg))
    }

    /// 2× bilinear upsampling of an `h × w × c` image.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::contract(format!("upsample2x: expected h×w×c, got {s:?}"))),
        };
        let value = kernels::upsample2x(self.data(x), h, w, c);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(vec![2 * h, 2 * w, c], value), Op::Upsample2x { x, h, w, c }, rg))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::of(self.value(a).numel() as f64);
        let s = self.data(a).iter().zip(self.data(b)).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Mean absolute difference over all elements.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mae")?;
        let n = T::of(self.value(a).numel() as f64);
        let s = self.data(a).iter().zip(self.data(b)).fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mae { a, b }, rg))
    }

    /// Bilinear interpolation of an `r × r × c` plane at `n × 2` coordinates
    /// `(u, v)` in `[-1, 1]` (u indexes columns, v rows; the corners land
    /// exactly on the corner nodes). Out-of-range coordinates are clamped.
    pub fn bilinear_sample(&mut self, plane: Var, coords: Var) -> Result<Var> {
        let (r, c) = match *self.shape(plane) {
            [r1, r2, c] if r1 == r2 => (r1, c),
            ref s => return Err(Error::contract(format!("bilinear_sample: plane must be r×r×c, got {s:?}"))),
        };
        if r < 2 || c == 0 {
            return Err(Error::contract(format!("bilinear_sample: need r ≥ 2 and c ≥ 1, got r={r} c={c}")));
        }
        let n = match *self.shape(coords) {
            [n, 2] => n,
            ref s => return Err(Error::contract(format!("bilinear_sample: coords must be n×2, got {s:?}"))),
        };
        if !self.value(coords).all_finite() {
            return Err(Error::contract("bilinear_sample: non-finite coordinates"));
        }
        let pd = self.data(plane);
        let cd = self.data(coords);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            kernels::bilinear_point(pd, r, c, cd[2 * i], cd[2 * i + 1], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(plane) || self.requires_grad(coords);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::BilinearSample { plane, coords, r, c }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `nq × d`, `k`/`v` are
    /// `nk × d`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if dk != d || self.shape(v) != [nk, d] {
            return Err(Error::contract("attention: q/k/v widths disagree"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); nq * d];
        let mut probs = vec![T::zero(); heads * nq * nk];
        for h in 0..heads {
            let qh = gather_cols(qd, nq, d, h * dh, dh);
            let kh = gather_cols(kd, nk, d, h * dh, dh);
            let vh = gather_cols(vd, nk, d, h * dh, dh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            kernels::matmul_a_bt_acc(&qh, &kh, p, nq, dh, nk);
            for row in p.chunks_mut(nk) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_in_place(row);
            }
            let oh = kernels::matmul(p, &vh, nq, nk, dh);
            scatter_cols(&oh, &mut out, nq, d, h * dh, dh);
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(Tensor::from_parts(vec![nq, d], out), Op::Attention { q, k, v, heads, nq, nk, d, probs }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::contract("cross_entropy: labels do not match logits"));
        }
        let probs = kernels::softmax_rows(self.data(logits), k);
        let tiny = T::of(1e-30);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            loss -= (probs[i * k + l].max(tiny)).ln();
        }
        loss = loss / T::of(n as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), k, probs }, rg))
    }

    /// Volume-rendering composite of `rays` rays with `samples` samples each.
    ///
    /// `sigma` has `rays·samples` densities, `rgb` `rays·samples·3` colors,
    /// `t` the sorted sample depths per ray. Output is `rays × 4`: color
    /// followed by expected depth (background color and `far` fill the
    /// residual transmittance). Depths are constants.
    pub fn composite(
        &mut self,
        sigma: Var,
        rgb: Var,
        t: &[T],
        samples: usize,
        far: T,
        background: [T; 3],
    ) -> Result<Var> {
        if samples == 0 || !t.len().is_multiple_of(samples) {
            return Err(Error::contract("composite: depth count not a multiple of samples"));
        }
        let rays = t.len() / samples;
        if self.value(sigma).numel() != t.len() || self.value(rgb).numel() != 3 * t.len() {
            return Err(Error::contract("composite: sigma/rgb sizes disagree with depths"));
        }
        for ray_t in t.chunks(samples) {
            check_sorted(ray_t, far)?;
        }
        let sd = self.data(sigma);
        let cd = self.data(rgb);
        let mut out = Vec::with_capacity(rays * 4);
        for r in 0..rays {
            let s = r * samples;
            let (color, depth, _, _) =
                composite_ray(&sd[s..s + samples], &cd[3 * s..3 * (s + samples)], &t[s..s + samples], far, background);
            out.extend_from_slice(&color);
            out.push(depth);
        }
        let rg = self.requires_grad(sigma) || self.requires_grad(rgb);
        Ok(self.push(
            Tensor::from_parts(vec![rays, 4], out),
            Op::Composite { sigma, rgb, t: t.to_vec(), far, background, samples },
            rg,
        ))
    }

    pub(crate) fn backward_node(&self, idx: usize, owned: Vec<T>, bufs: &mut GradBufs<T>) -> Result<()> {
        let go = &owned[..];
        let node = &self.nodes[idx];
        let out = node.value.data();
        bufs.set_current(node.op.name());
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = bufs.get(a) {
                    kernels::matmul_a_bt_acc(go, self.data(b), ga, m, n, k);
                }
                if let Some(gb) = bufs.get(b) {
                    kernels::matmul_at_b_acc(self.data(a), go, gb, m, k, n);
                }
            }
            &Op::Add { a, b } => {
                if let Some(g) = bufs.get(a) {
                    add_into(g, go);
                }
                bufs.accumulate(b, owned);
            }
            &Op::Sub { a, b } => {
                if let Some(g) = bufs.get(a) {
                    add_into(g, go);
                }
                if let Some(g) = bufs.get(b) {
                    for (gv, &o) in g.iter_mut().zip(go) {
                        *gv -= o;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(g) = bufs.get(a) {
                    for ((gv, &o), &bv) in g.iter_mut().zip(go).zip(self.data(b)) {
                        *gv += o * bv;
                    }
                }
                if let Some(g) = bufs.get(b) {
                    for ((gv, &o), &av) in g.iter_mut().zip(go).zip(self.data(a)) {
                        *gv += o * av;
                    }
                }
            }
            &Op::AddBias { x, b, cols } => {
                if let Some(g) = bufs.get(b) {
                    for row in go.chunks(cols) {
                        add_into(g, row);
                    }
                }
                bufs.accumulate(x, owned);
            }
            &Op::Affine { x, scale } => {
                if let Some(g) = bufs.get(x) {
                    for (gv, &o) in g.iter_mut().zip(go) {
                        *gv += scale * o;
                    }
                }
            }
            &Op::Exp { x } => {
                let cap = T::of(EXP_CLAMP);
                let xd = self.data(x);
                if let Some(g) = bufs.get(x) {
                    for i in 0..g.len() {
                        if xd[i] < cap {
                            g[i] += go[i] * out[i];
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(g) = bufs.get(x) {
                    for i in 0..g.len() {
                        g[i] += go[i] * out[i] * (T::one() - out[i]);
                    }
                }
            }
            &Op::Softplus { x } => {
                let xd = self.data(x);
                if let Some(g) = bufs.get(x) {
                    for i in 0..g.len() {
                        g[i] += go[i] * sigmoid(xd[i]);
                    }
                }
            }
            &Op::Relu { x } => {
                let xd = self.data(x);
                if let Some(g) = bufs.get(x) {
                    for i in 0..g.len() {
                        if xd[i] > T::zero() {
                            g[i] += go[i];
                        }
                    }
                }
            }
            Op::Gelu { x, t } => {
                let xd = self.data(*x);
                if let Some(g) = bufs.get(*x) {
                    for (((gv, &o), &xv), &tv) in g.iter_mut().zip(go).zip(xd).zip(t) {
                        *gv += o * gelu_grad_from(xv, tv);
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(g) = bufs.get(x) {
                    for ((grow, prow), orow) in g.chunks_mut(cols).zip(out.chunks(cols)).zip(go.chunks(cols)) {
                        kernels::softmax_backward_row(prow, orow, grow);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
                let cols = *cols;
                let gm = self.data(*gamma);
                if let Some(g) = bufs.get(*x) {
                    let n = T::of(cols as f64);
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gorow = &go[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            dxhat[c] = gorow[c] * gm[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += rs * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                }
                if let Some(g) = bufs.get(*gamma) {
                    for (gorow, xh) in go.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            g[c] += gorow[c] * xh[c];
                        }
                    }
                }
                if let Some(g) = bufs.get(*beta) {
                    for gorow in go.chunks(cols) {
                        add_into(g, gorow);
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(g) = bufs.get(x) {
                    for gv in g.iter_mut() {
                        *gv += go[0];
                    }
                }
            }
            &Op::Mean { x } => {
                if let Some(g) = bufs.get(x) {
                    let s = go[0] / T::of(g.len() as f64);
                    for gv in g.iter_mut() {
                        *gv += s;
                    }
                }
            }
            Op::Concat { parts, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if let Some(g) = bufs.get(p) {
                        for o in 0..*outer {
                            let src = &go[(o * total + off) * inner..(o * total + off + sz) * inner];
                            add_into(&mut g[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    }
                    off += sz;
                }
            }
            &Op::Slice { x, outer, inner, axis_len, start, len } => {
                if let Some(g) = bufs.get(x) {
                    for o in 0..outer {
                        let dst = (o * axis_len + start) * inner;
                        add_into(&mut g[dst..dst + len * inner], &go[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            &Op::Reshape { x } => bufs.accumulate(x, owned),
            Op::Conv3x3 { x, w, b, h, wd, cin, cout, col } => {
                let (hw, k9, cout) = (h * wd, 9 * cin, *cout);
                if let Some(g) = bufs.get(*w) {
                    kernels::matmul_at_b_acc(col, go, g, hw, k9, cout);
                }
                if let Some(g) = bufs.get(*b) {
                    for row in go.chunks(cout) {
                        add_into(g, row);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcol = vec![T::zero(); hw * k9];
                    kernels::matmul_a_bt_acc(go, self.data(*w), &mut dcol, hw, cout, k9);
                    if let Some(g) = bufs.get(*x) {
                        kernels::col2im3x3(&dcol, *h, *wd, *cin, g);
                    }
                }
            }
            &Op::Upsample2x { x, h, w, c } => {
                if let Some(g) = bufs.get(x) {
                    kernels::upsample2x_backward(go, h, w, c, g);
                }
            }
            &Op::Mse { a, b } => {
                let n = T::of(self.value(a).numel() as f64);
                let two = T::of(2.0);
                let (ad, bd) = (self.data(a), self.data(b));
                let s = go[0] * two / n;
                if let Some(g) = bufs.get(a) {
                    for i in 0..g.len() {
                        g[i] += s * (ad[i] - bd[i]);
                    }
                }
                if let Some(g) = bufs.get(b) {
                    for i in 0..g.len() {
                        g[i] -= s * (ad[i] - bd[i]);
                    }
                }
            }
            &Op::Mae { a, b } => {
                let n = T::of(self.value(a).numel() as f64);
                let (ad, bd) = (self.data(a), self.data(b));
                let s = go[0] / n;
                let sign = |d: T| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                if let Some(g) = bufs.get(a) {
                    for i in 0..g.len() {
                        g[i] += s * sign(ad[i] - bd[i]);
                    }
                }
                if let Some(g) = bufs.get(b) {
                    for i in 0..g.len() {
                        g[i] -= s * sign(ad[i] - bd[i]);
                    }
                }
            }
            &Op::BilinearSample { plane, coords, r, c } => {
                let cd = self.data(coords);
                let n = cd.len() / 2;
                let one = T::one();
                if let Some(g) = bufs.get(plane) {
                    for i in 0..n {
                        let (x0, fx) = kernels::grid_cell(cd[2 * i].as_f64(), r);
                        let (y0, fy) = kernels::grid_cell(cd[2 * i + 1].as_f64(), r);
                        let (fx, fy) = (T::of(fx), T::of(fy));
                        let gorow = &go[i * c..(i + 1) * c];
                        let taps = [
                            (y0, x0, (one - fx) * (one - fy)),
                            (y0, x0 + 1, fx * (one - fy)),
                            (y0 + 1, x0, (one - fx) * fy),
                            (y0 + 1, x0 + 1, fx * fy),
                        ];
                        for (yy, xx, wt) in taps {
                            let base = (yy * r + xx) * c;
                            kernels::axpy(wt, gorow, &mut g[base..base + c]);
                        }
                    }
                }
                if self.requires_grad(coords) {
                    let pd = self.data(plane);
                    let half_span = T::of((r - 1) as f64 * 0.5);
                    let mut dc = vec![T::zero(); 2 * n];
                    for i in 0..n {
                        let (u, v) = (cd[2 * i].as_f64(), cd[2 * i + 1].as_f64());
                        let (x0, fx) = kernels::grid_cell(u, r);
                        let (y0, fy) = kernels::grid_cell(v, r);
                        let (fx, fy) = (T::of(fx), T::of(fy));
                        let gorow = &go[i * c..(i + 1) * c];
                        let b00 = (y0 * r + x0) * c;
                        let b10 = ((y0 + 1) * r + x0) * c;
                        let mut du = T::zero();
                        let mut dv = T::zero();
                        for ch in 0..c {
                            let (p00, p01) = (pd[b00 + ch], pd[b00 + c + ch]);
                            let (p10, p11) = (pd[b10 + ch], pd[b10 + c + ch]);
                            du += gorow[ch] * ((one - fy) * (p01 - p00) + fy * (p11 - p10));
                            dv += gorow[ch] * ((one - fx) * (p10 - p00) + fx * (p11 - p01));
                        }
                        if u.abs() < 1.0 {
                            dc[2 * i] = du * half_span;
                        }
                        if v.abs() < 1.0 {
                            dc[2 * i + 1] = dv * half_span;
                        }
                    }
                    if let Some(g) = bufs.get(coords) {
                        add_into(g, &dc);
                    }
                }
            }
            Op::Attention { q, k, v, heads, nq, nk, d, probs } => {
                let (heads, nq, nk, d) = (*heads, *nq, *nk, *d);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![T::zero(); nq * d];
                let mut dk = vec![T::zero(); nk * d];
                let mut dv = vec![T::zero(); nk * d];
                for h in 0..heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let qh = gather_cols(qd, nq, d, h * dh, dh);
                    let kh = gather_cols(kd, nk, d, h * dh, dh);
                    let vh = gather_cols(vd, nk, d, h * dh, dh);
                    let doh = gather_cols(go, nq, d, h * dh, dh);
                    let mut dvh = vec![T::zero(); nk * dh];
                    kernels::matmul_at_b_acc(p, &doh, &mut dvh, nq, nk, dh);
                    let mut dp = vec![T::zero(); nq * nk];
                    kernels::matmul_a_bt_acc(&doh, &vh, &mut dp, nq, dh, nk);
                    let mut ds = vec![T::zero(); nq * nk];
                    for ((dsrow, prow), dprow) in ds.chunks_mut(nk).zip(p.chunks(nk)).zip(dp.chunks(nk)) {
                        kernels::softmax_backward_row(prow, dprow, dsrow);
                        for s in dsrow.iter_mut() {
                            *s *= scale;
                        }
                    }
                    let dqh = kernels::matmul(&ds, &kh, nq, nk, dh);
                    let mut dkh = vec![T::zero(); nk * dh];
                    kernels::matmul_at_b_acc(&ds, &qh, &mut dkh, nq, nk, dh);
                    scatter_cols(&dqh, &mut dq, nq, d, h * dh, dh);
                    scatter_cols(&dkh, &mut dk, nk, d, h * dh, dh);
                    scatter_cols(&dvh, &mut dv, nk, d, h * dh, dh);
                }
                for (var, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(g) = bufs.get(var) {
                        add_into(g, &src);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, k, probs } => {
                let k = *k;
                if let Some(g) = bufs.get(*logits) {
                    let s = go[0] / T::of(labels.len() as f64);
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            g[i * k + j] += s * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Composite { sigma, rgb, t, far, background, samples } => {
                let (samples, far) = (*samples, *far);
                let rays = t.len() / samples;
                let sd = self.data(*sigma);
                let cd = self.data(*rgb);
                let mut dsig = vec![T::zero(); sd.len()];
                let mut drgb = vec![T::zero(); cd.len()];
                let mut trans_after = vec![T::zero(); samples];
                let mut vals = vec![T::zero(); samples];
                let mut weights = vec![T::zero(); samples];
                let mut deltas = vec![T::zero(); samples];
                for r in 0..rays {
                    let s0 = r * samples;
                    let g = &go[4 * r..4 * r + 4];
                    let ts = &t[s0..s0 + samples];
                    let mut trans = T::one();
                    for i in 0..samples {
                        let next = if i + 1 < samples { ts[i + 1] } else { far };
                        deltas[i] = next - ts[i];
                        let decay = (-(sd[s0 + i] * deltas[i])).exp();
                        weights[i] = trans * (T::one() - decay);
                        trans *= decay;
                        trans_after[i] = trans;
                        let c = &cd[3 * (s0 + i)..3 * (s0 + i) + 3];
                        vals[i] = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3] * ts[i];
                        for ch in 0..3 {
                            drgb[3 * (s0 + i) + ch] = weights[i] * g[ch];
                        }
                    }
                    let t_res = trans;
                    let v_bg = g[0] * background[0] + g[1] * background[1] + g[2] * background[2] + g[3] * far;
                    // suffix = Σ_{k>i} w_k v_k, walked back to front.
                    let mut suffix = T::zero();
                    for i in (0..samples).rev() {
                        let da = trans_after[i] * vals[i] - suffix - t_res * v_bg;
                        dsig[s0 + i] = deltas[i] * da;
                        suffix += weights[i] * vals[i];
                    }
                }
                if let Some(g) = bufs.get(*sigma) {
                    add_into(g, &dsig);
                }
                if let Some(g) = bufs.get(*rgb) {
                    add_into(g, &drgb);
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gather_cols<T: Scalar>(x: &[T], rows: usize, cols: usize, start: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
    }
    out
}

fn scatter_cols<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, cols: usize, start: usize, width: usize) {
    for r in 0..rows {
        add_into(&mut dst[r * cols + start..r * cols + start + width], &src[r * width..(r + 1) * width]);
    }
}
