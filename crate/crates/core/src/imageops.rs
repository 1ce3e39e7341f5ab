//! Plain image transforms on `h × w × c` (or `h × w`) tensors.

use crate::diffmath::{Scalar, Tensor};

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    match *t.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        ref s => panic!("expected an image tensor, got shape {s:?}"),
    }
}

fn with_dims<T: Scalar>(like: &Tensor<T>, h: usize, w: usize, data: Vec<T>) -> Tensor<T> {
    let shape = if like.shape().len() == 2 { vec![h, w] } else { vec![h, w, like.shape()[2]] };
    Tensor::new(shape, data).expect("size computed from dims")
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize<T: Scalar>(img: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (h, w, c) = dims(img);
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let src = img.data();
    let axis = |o: usize, n: usize, on: usize| {
        let p = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::of(p - i0 as f64))
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let (y0, y1, fy) = axis(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = axis(ox, w, ow);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                out.push(top + fy * (bot - top));
            }
        }
    }
    with_dims(img, oh, ow, out)
}

/// Mirrors columns.
pub fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = dims(img);
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    with_dims(img, h, w, out)
}

/// The `ch × cw` window with top-left corner `(top, left)`.
pub fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<T> {
    let (h, w, c) = dims(img);
    assert!(top + ch <= h && left + cw <= w, "crop window outside image");
    let src = img.data();
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        out.extend_from_slice(&src[(y * w + left) * c..(y * w + left + cw) * c]);
    }
    with_dims(img, ch, cw, out)
}

/// Replaces each RGB pixel by its luma, keeping three channels.
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let y = T::of(0.299) * px[0] + T::of(0.587) * px[1] + T::of(0.114) * px[2];
        px.fill(y);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::<f32>::from_fn(&[5, 7, 3], |i| i as f32);
        assert_eq!(resize(&img, 5, 7), img);
        let c = Tensor::<f32>::full(&[9, 9, 3], 0.25);
        let r = resize(&c, 4, 13);
        assert_eq!(r.shape(), &[4, 13, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Tensor::<f64>::from_fn(&[2, 4], |i| i as f64);
        let r = resize(&img, 1, 2);
        assert_eq!(r.data(), &[2.5, 4.5]);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Tensor::<f32>::from_fn(&[3, 4, 3], |i| i as f32);
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
        let d = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        assert_eq!(hflip(&d).data()[0], 3.0);
    }

    #[test]
    fn crop_window() {
        let img = Tensor::<f32>::from_fn(&[4, 4], |i| i as f32);
        assert_eq!(crop(&img, 1, 2, 2, 2).data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
