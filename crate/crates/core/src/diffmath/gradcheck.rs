use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar function of the given inputs on a fresh graph. Returns
/// the largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over
/// every input coordinate. The function must be smooth around `points`.
pub fn check_gradients<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        for j in 0..points[pi].numel() {
            let orig = points[pi].data()[j];
            probe[pi].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`check_gradients`].
pub fn check_gradients_at<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(point), step)
}

fn scalar_value(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::contract(format!("gradient check needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}
