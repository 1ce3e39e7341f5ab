//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

use super::tensor::Scalar;

/// Dot product with eight independent accumulators combined in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] · b[k,n]`, in `MR × NR` register tiles.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if n < NR && k >= 16 {
        // Narrow outputs: one dot product per element against columns of b.
        let bt = transpose(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let full_rows = m - m % MR;
    for i in (0..full_rows).step_by(MR) {
        let ar: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for (accr, a_r) in acc.iter_mut().zip(&ar) {
                    let av = a_r[p];
                    for (x, &bv) in accr.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, &v) in crow.iter_mut().zip(row) {
                    *cv += v;
                }
            }
            j += NR;
        }
        if j < n {
            for r in 0..MR {
                let crow = &mut c[(i + r) * n..(i + r + 1) * n];
                for (p, &av) in ar[r].iter().enumerate() {
                    axpy(av, &b[p * n + j..(p + 1) * n], &mut crow[j..]);
                }
            }
        }
    }
    for i in full_rows..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`, reduced over row blocks of `a` and `b`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if n < NR && k >= NR {
        // Narrow b: compute cᵀ = bᵀ·a, which tiles along k instead.
        let mut ct = vec![T::zero(); n * k];
        matmul_at_b_acc(b, a, &mut ct, m, n, k);
        for p in 0..k {
            for q in 0..n {
                c[p * n + q] += ct[q * k + p];
            }
        }
        return;
    }
    const BLOCK: usize = 256;
    let full_p = k - k % MR;
    let full_j = n - n % NR;
    for i0 in (0..m).step_by(BLOCK) {
        let rows = i0..(i0 + BLOCK).min(m);
        for p in (0..full_p).step_by(MR) {
            for j in (0..full_j).step_by(NR) {
                let mut acc = [[T::zero(); NR]; MR];
                for i in rows.clone() {
                    let arow: &[T; MR] = a[i * k + p..i * k + p + MR].try_into().expect("tile height");
                    let brow: &[T; NR] = b[i * n + j..i * n + j + NR].try_into().expect("tile width");
                    for (accr, &av) in acc.iter_mut().zip(arow) {
                        for (x, &bv) in accr.iter_mut().zip(brow) {
                            *x += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    for (l, &v) in row.iter().enumerate() {
                        c[(p + r) * n + j + l] += v;
                    }
                }
            }
            if full_j < n {
                for i in rows.clone() {
                    for r in 0..MR {
                        let av = a[i * k + p + r];
                        axpy(av, &b[i * n + full_j..(i + 1) * n], &mut c[(p + r) * n + full_j..(p + r + 1) * n]);
                    }
                }
            }
        }
        for i in rows {
            let brow = &b[i * n..(i + 1) * n];
            for p in full_p..k {
                axpy(a[i * k + p], brow, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    if m < 16 {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for j in 0..k {
                c[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
            }
        }
        return;
    }
    matmul_acc(a, &transpose(b, k, n), c, m, n, k);
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Given softmax output `p` and upstream gradient `g` for one row, writes the
/// gradient with respect to the logits into `out`.
pub fn softmax_backward_row<T: Scalar>(p: &[T], g: &[T], out: &mut [T]) {
    let s = dot(p, g);
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
        *o += pv * (gv - s);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns (output, normalized x̂, 1/σ per row).
pub fn layer_norm_rows<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], cols: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::of(cols as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Forward pass of 2× bilinear upsampling (half-pixel centers, edge clamped)
/// on an `h × w × c` image.
pub fn upsample2x<T: Scalar>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let taps = [(y0, x0, wy0 * wx0), (y0, x1, wy0 * wx1), (y1, x0, wy1 * wx0), (y1, x1, wy1 * wx1)];
            for (yy, xx, wt) in taps {
                let wt = T::of(wt);
                let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                axpy(wt, src, o);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(g: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let ow = 2 * w;
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let go = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let taps = [(y0, x0, wy0 * wx0), (y0, x1, wy0 * wx1), (y1, x0, wy1 * wx0), (y1, x1, wy1 * wx1)];
            for (yy, xx, wt) in taps {
                let wt = T::of(wt);
                axpy(wt, go, &mut dx[(yy * w + xx) * c..(yy * w + xx + 1) * c]);
            }
        }
    }
}

/// Source taps `(i0, i1, w0, w1)` for each of the `2n` output positions.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// im2col for a 3×3, stride-1, zero-padded convolution: `[h·w, 9·c]`.
pub fn im2col3x3<T: Scalar>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut col = vec![T::zero(); h * w * k];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = ((sy as usize) * w + sx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    col
}

pub fn col2im3x3<T: Scalar>(col: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let k = 9 * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = ((sy as usize) * w + sx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for i in 0..c {
                        dx[dst + i] += row[src + i];
                    }
                }
            }
        }
    }
}

/// Continuous pixel position of a normalized coordinate in `[-1, 1]` on a
/// grid of `r` nodes (corners map onto the outermost nodes). Returns the lower
/// node index and the fractional offset.
#[inline]
pub fn grid_cell(u: f64, r: usize) -> (usize, f64) {
    let p = (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (r - 1) as f64;
    let i0 = (p.floor() as usize).min(r - 2);
    (i0, p - i0 as f64)
}

/// Bilinear lookup of one point on an `r × r × c` plane; coordinates are
/// `(u, v)` = (column, row) in `[-1, 1]`.
#[inline]
pub fn bilinear_point<T: Scalar>(plane: &[T], r: usize, c: usize, u: T, v: T, out: &mut [T]) {
    let (x0, fx) = grid_cell(u.as_f64(), r);
    let (y0, fy) = grid_cell(v.as_f64(), r);
    let fx = T::of(fx);
    let fy = T::of(fy);
    let one = T::one();
    let w00 = (one - fx) * (one - fy);
    let w01 = fx * (one - fy);
    let w10 = (one - fx) * fy;
    let w11 = fx * fy;
    let base00 = (y0 * r + x0) * c;
    let base10 = ((y0 + 1) * r + x0) * c;
    let p00 = &plane[base00..base00 + c];
    let p01 = &plane[base00 + c..base00 + 2 * c];
    let p10 = &plane[base10..base10 + c];
    let p11 = &plane[base10 + c..base10 + 2 * c];
    for ((((o, &a), &b), &cc), &d) in out[..c].iter_mut().zip(p00).zip(p01).zip(p10).zip(p11) {
        *o = w00 * a + w01 * b + w10 * cc + w11 * d;
    }
}
