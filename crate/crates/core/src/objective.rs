//! Reconstruction, distillation and density losses and their weighted sum.

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub dist: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 0.1, depth: 1.0, dist: 1.0, norm: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rgb", self.rgb),
            ("lambda_depth", self.depth),
            ("lambda_dist", self.dist),
            ("lambda_norm", self.norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rgb: f64,
    pub depth: f64,
    pub dist: f64,
    pub norm: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills in `total` from the components.
    pub fn weighted(rgb: f64, depth: f64, dist: f64, norm: f64, w: &LossWeights) -> Result<Self> {
        w.validate()?;
        Ok(Self { rgb, depth, dist, norm, total: w.rgb * rgb + w.depth * depth + w.dist * dist + w.norm * norm })
    }

    pub fn is_finite(&self) -> bool {
        [self.rgb, self.depth, self.dist, self.norm, self.total].iter().all(|v| v.is_finite())
    }

    /// Accumulates `other` scaled by `s`.
    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.rgb += s * other.rgb;
        self.depth += s * other.depth;
        self.dist += s * other.dist;
        self.norm += s * other.norm;
        self.total += s * other.total;
    }
}

fn checked_mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, what: &str) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!("{what}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    g.mse(a, b)
}

/// Per-element mean squared error between target and reconstructed images.
pub fn rgb_loss<T: Scalar>(g: &mut Graph<T>, target: Var, rendered: Var) -> Result<Var> {
    checked_mse(g, target, rendered, "rgb_loss")
}

/// Per-element mean squared error between target and reconstructed depth.
pub fn depth_loss<T: Scalar>(g: &mut Graph<T>, target: Var, rendered: Var) -> Result<Var> {
    checked_mse(g, target, rendered, "depth_loss")
}

/// Mean absolute density over all queried points.
pub fn density_norm_loss<T: Scalar>(g: &mut Graph<T>, sigma: Var) -> Result<Var> {
    let zeros = g.constant(Tensor::zeros(g.shape(sigma)));
    g.mae(sigma, zeros)
}

/// Per-element mean squared difference between student and teacher grids.
/// The teacher side must not carry gradients.
pub fn distillation_loss<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    if g.requires_grad(teacher) {
        return Err(Error::contract("distillation target must be detached from the teacher parameters"));
    }
    checked_mse(g, student, teacher, "distillation_loss")
}

/// Component losses of one item, each a scalar variable.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rgb: Var,
    pub depth: Var,
    /// Absent when distillation is disabled.
    pub dist: Option<Var>,
    pub norm: Option<Var>,
}

/// Weighted sum of the terms; returns the total variable and its report.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let report = LossReport::weighted(
        val(g, Some(terms.rgb)),
        val(g, Some(terms.depth)),
        val(g, terms.dist),
        val(g, terms.norm),
        w,
    )?;
    let mut total = g.scale(terms.rgb, w.rgb);
    let d = g.scale(terms.depth, w.depth);
    total = g.add(total, d)?;
    for (term, lambda) in [(terms.dist, w.dist), (terms.norm, w.norm)] {
        if let Some(t) = term {
            let s = g.scale(t, lambda);
            total = g.add(total, s)?;
        }
    }
    Ok((total, report))
}
