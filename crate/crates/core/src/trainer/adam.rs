use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam with one learning rate for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f64) -> Self {
        Self { lr, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Applies one update. `grads` is indexed like `params.ids()`. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::contract(format!("gradient shape mismatch for `{}`", params.name(id))));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: format!("gradient of `{}`", params.name(id)) });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let p = params.get_mut(id).data_mut();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
                p[i] = (p[i] as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[3], v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.5);
        let mut opt = Adam::new(&p, 1e-4);
        opt.step(&mut p, &[Tensor::full(&[3], 1.0)]).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        let expect = 0.5f64 - 1e-4 / (1.0 + 1e-8);
        for &x in p.by_name("w").unwrap().data() {
            assert!((x as f64 - expect).abs() < 1e-7);
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one(0.25);
        let before = p.clone();
        let mut opt = Adam::new(&p, 1e-2);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn matches_hand_rolled_update_over_steps() {
        let grads = [0.3, -1.2, 0.05, 2.0];
        let mut p = one(1.0);
        let mut opt = Adam::new(&p, 1e-3);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            opt.step(&mut p, &[Tensor::full(&[3], g as f32)]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = k as i32 + 1;
            x -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.by_name("w").unwrap().data()[0] as f64 - x).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut p = one(0.5);
        let before = p.clone();
        let mut opt = Adam::new(&p, 1e-4);
        let bad = Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
        let err = opt.step(&mut p, &[bad]).unwrap_err();
        assert!(matches!(&err, Error::NonFinite { op } if op.contains("`w`")));
        assert_eq!(p, before);
        assert_eq!(opt.t, 0);
    }
}
