use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64_slice(&[3], &[1.0, -2.0, 5.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn mse_gradient_by_hand() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.constant(Tensor::scalar(0.0));
    let l = g.mse(x, y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
}

#[test]
fn softmax_then_mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[4], 0.0, 0.5);
    let err = check_gradients_at(
        |g, v| {
            let s = g.softmax(v);
            let t = g.constant(target.clone());
            g.mse(s, t)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn nan_in_forward_loss_names_the_op() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(f64::NAN));
    let s = g.sum(x);
    match g.backward(s) {
        Err(crate::Error::NonFinite { op }) => assert!(op.contains("sum"), "{op}"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn nan_in_backward_names_the_producing_op() {
    // d/dx of (x · inf-weighted constant) produces inf·0 = NaN in mul's backward.
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let w = g.constant(Tensor::scalar(f64::INFINITY));
    let p = g.mul(x, w).unwrap();
    let zero = g.constant(Tensor::scalar(0.0));
    let q = g.mul(p, zero).unwrap();
    // forward q = inf·0 = NaN → caught at the loss.
    assert!(g.backward(q).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.param(Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
    let l = g.mul(x, x).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(y).is_none());
    assert_eq!(grads.wrt(&g, y).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn square_at_three() {
    let err = check_gradients_at(|g, v| g.mul(v, v), &Tensor::scalar(3.0), STEP).unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

#[test]
fn every_primitive_passes_gradient_check() {
    for (name, err) in crate::gradsuite::primitive_checks().unwrap() {
        assert!(err < PRIMITIVE_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn bilinear_sample_node_and_midpoint() {
    let mut g = Graph::<f64>::new();
    // 3×3 plane, 1 channel, value = 10·row + col.
    let plane = g.constant(Tensor::from_fn(&[3, 3, 1], |i| (10 * (i / 3) + i % 3) as f64));
    let coords = g.constant(Tensor::from_f64_slice(&[2, 2], &[0.0, 1.0, -1.0, -1.0]).unwrap());
    let out = g.bilinear_sample(plane, coords).unwrap();
    // (u=0, v=1) → column 1, row 2 → 21; (−1,−1) → node (0,0) → 0.
    assert_eq!(g.value(out).data(), &[21.0, 0.0]);

    let mut g = Graph::<f64>::new();
    let plane = g.constant(Tensor::from_f64_slice(&[2, 2, 1], &[0.0, 0.0, 4.0, 4.0]).unwrap());
    let center = g.constant(Tensor::from_f64_slice(&[1, 2], &[0.0, 0.0]).unwrap());
    let out = g.bilinear_sample(plane, center).unwrap();
    assert_eq!(g.value(out).data(), &[2.0]);
}

#[test]
fn bilinear_sample_rejects_degenerate_planes() {
    let mut g = Graph::<f64>::new();
    let plane = g.constant(Tensor::zeros(&[1, 1, 2]));
    let coords = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.bilinear_sample(plane, coords).is_err());
}

#[test]
fn bilinear_sample_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (r, c) = (7usize, 3usize);
    let plane = rand_tensor(&mut rng, &[r, r, c], -2.0, 2.0);
    let coords = rand_tensor(&mut rng, &[100, 2], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let pv = g.constant(plane.clone());
    let cv = g.constant(coords.clone());
    let out = g.bilinear_sample(pv, cv).unwrap();
    let got = g.value(out).data();

    let at = |y: usize, x: usize, ch: usize| plane.data()[(y * r + x) * c + ch];
    let mut worst = 0.0f64;
    for i in 0..100 {
        let u = coords.data()[2 * i];
        let v = coords.data()[2 * i + 1];
        let px = (u + 1.0) / 2.0 * (r - 1) as f64;
        let py = (v + 1.0) / 2.0 * (r - 1) as f64;
        let x0 = (px.floor() as usize).min(r - 2);
        let y0 = (py.floor() as usize).min(r - 2);
        let (tx, ty) = (px - x0 as f64, py - y0 as f64);
        for ch in 0..c {
            let top = at(y0, x0, ch) + tx * (at(y0, x0 + 1, ch) - at(y0, x0, ch));
            let bot = at(y0 + 1, x0, ch) + tx * (at(y0 + 1, x0 + 1, ch) - at(y0 + 1, x0, ch));
            let want = top + ty * (bot - top);
            worst = worst.max((want - got[i * c + ch]).abs());
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst}");
}

#[test]
fn bilinear_sample_clamps_out_of_range() {
    let mut g = Graph::<f64>::new();
    let plane = g.constant(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
    let coords = g.constant(Tensor::from_f64_slice(&[2, 2], &[5.0, -7.0, 1.0, -1.0]).unwrap());
    let out = g.bilinear_sample(plane, coords).unwrap();
    let d = g.value(out).data();
    assert_eq!(d[0], d[1]);
}

#[test]
fn softplus_is_nonnegative_and_exp_is_clamped() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64_slice(&[4], &[-800.0, 0.0, 30.0, 1000.0]).unwrap());
    let sp = g.softplus(x);
    assert!(g.value(sp).data().iter().all(|&v| v >= 0.0));
    assert!((g.value(sp).data()[1] - 2f64.ln()).abs() < 1e-12);
    let e = g.exp(x);
    assert!(g.value(e).all_finite());
    assert_eq!(g.value(e).data()[3], 80f64.exp());
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[8, 6], |_| rng.gen_range(-1.0..1.0)));
        let w = g.param(Tensor::from_fn(&[6, 6], |_| rng.gen_range(-1.0..1.0)));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let s = g.softmax(h);
        let l = g.mean(s);
        let l2 = g.mul(l, l).unwrap();
        let grads = g.backward(l2).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradient_is_linear_in_the_loss(
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = Tensor::from_f64_slice(&[2, 3], &xs).unwrap();
            let grad_of = |ca: f64, cb: f64| {
                let mut g = Graph::<f64>::new();
                let v = g.param(x.clone());
                let f = g.sigmoid(v);
                let f = g.sum(f);
                let sq = g.mul(v, v).unwrap();
                let gg = g.mean(sq);
                let fa = g.scale(f, ca);
                let gb = g.scale(gg, cb);
                let l = g.add(fa, gb).unwrap();
                g.backward(l).unwrap().wrt(&g, v)
            };
            let combined = grad_of(a, b);
            let gf = grad_of(1.0, 0.0);
            let gg = grad_of(0.0, 1.0);
            for i in 0..6 {
                let want = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - want).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_ops_stay_finite(xs in proptest::collection::vec(-50.0f64..50.0, 8)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64_slice(&[2, 4], &xs).unwrap());
            for v in [g.exp(x), g.sigmoid(x), g.softplus(x), g.gelu(x), g.softmax(x)] {
                prop_assert!(g.value(v).all_finite());
            }
        }
    }
}
