//! Fixed-camera volume rendering of a triplane radiance field.

use rand::Rng;

use crate::diffmath::{composite_ray, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::seeding;
use crate::triplane::{query_features, Triplane};

/// Pinhole camera on the −Z axis looking at the origin, +Y up.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub distance: f64,
    pub fov_y_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self { distance: 2.7, fov_y_deg: 45.0, near: 1.7, far: 3.7 }
    }
}

/// Rays through pixel centers, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    /// `(row, col)` of each ray.
    pub pixels: Vec<(usize, usize)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::config(format!("camera needs 0 < near < far, got near={} far={}", self.near, self.far)));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::config(format!("field of view {} out of range", self.fov_y_deg)));
        }
        Ok(())
    }

    /// Focal length in pixels for a square image of side `res`.
    pub fn focal(&self, res: usize) -> f64 {
        res as f64 / 2.0 / (self.fov_y_deg.to_radians() / 2.0).tan()
    }

    pub fn origin(&self) -> [f64; 3] {
        [0.0, 0.0, -self.distance]
    }

    /// Unit direction through the center of pixel `(row, col)`.
    pub fn direction(&self, res: usize, row: usize, col: usize) -> [f64; 3] {
        let f = self.focal(res);
        let c = res as f64 / 2.0;
        let x = (col as f64 + 0.5 - c) / f;
        let y = -(row as f64 + 0.5 - c) / f;
        let n = (x * x + y * y + 1.0).sqrt();
        [x / n, y / n, 1.0 / n]
    }

    pub fn generate_rays(&self, res: usize) -> Result<RayBatch> {
        if res < 2 {
            return Err(Error::contract(format!("resolution must be at least 2, got {res}")));
        }
        let mut rays = RayBatch {
            origins: Vec::with_capacity(res * res),
            directions: Vec::with_capacity(res * res),
            pixels: Vec::with_capacity(res * res),
        };
        for row in 0..res {
            for col in 0..res {
                rays.origins.push(self.origin());
                rays.directions.push(self.direction(res, row, col));
                rays.pixels.push((row, col));
            }
        }
        Ok(rays)
    }
}

/// One depth per equal-width bin of `[near, far]`, uniform within the bin,
/// or at the bin midpoint when `rng` is `None`.
pub fn stratified_samples<R: Rng>(n: usize, near: f64, far: f64, rng: Option<&mut R>) -> Vec<f64> {
    let w = (far - near) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * w).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * w).collect(),
    }
}

/// Draws `m` depths from the piecewise-constant density proportional to
/// `weights` over the bins delimited by `edges` (`weights.len() + 1` edges).
/// Falls back to a uniform density when the weights sum below `1e-8`.
/// Without `rng` the draws sit at the quantiles `(k + 0.5) / m`. Returns the
/// draws sorted ascending.
pub fn importance_samples<R: Rng>(edges: &[f64], weights: &[f64], m: usize, rng: Option<&mut R>) -> Vec<f64> {
    let n = weights.len();
    debug_assert_eq!(edges.len(), n + 1);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let pdf: Vec<f64> =
        if total < 1e-8 { vec![1.0 / n as f64; n] } else { weights.iter().map(|w| w.max(0.0) / total).collect() };
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p);
    }
    let us: Vec<f64> = match rng {
        Some(rng) => (0..m).map(|_| rng.gen::<f64>()).collect(),
        None => (0..m).map(|k| (k as f64 + 0.5) / m as f64).collect(),
    };
    let mut out: Vec<f64> = us
        .into_iter()
        .map(|u| {
            let u = u * cdf[n];
            // Last bin whose cdf start is <= u and which has mass.
            let mut b = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(n - 1);
            while pdf[b] <= 0.0 && b > 0 {
                b -= 1;
            }
            let frac = if pdf[b] > 0.0 { ((u - cdf[b]) / pdf[b]).clamp(0.0, 1.0) } else { 0.5 };
            edges[b] + frac * (edges[b + 1] - edges[b])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Merges two sorted depth lists.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_by(f64::total_cmp);
    out
}

/// Two-layer MLP turning summed plane features into density and color.
#[derive(Clone, Debug)]
pub struct RadianceMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Output of [`RadianceMlp::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `n × 1`, softplus-activated.
    pub sigma: Var,
    /// `n × 3`, sigmoid-activated.
    pub rgb: Var,
}

impl RadianceMlp {
    pub fn new<T: Scalar>(
        channels: usize,
        hidden: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(Error::config("radiance MLP needs positive widths"));
        }
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}{name}"), t);
        Ok(Self {
            w1: add("w1", fan_in_normal(&[channels, hidden], channels, rng))?,
            b1: add("b1", Tensor::zeros(&[hidden]))?,
            w2: add("w2", fan_in_normal(&[hidden, 4], hidden, rng))?,
            b2: add("b2", Tensor::zeros(&[4]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<FieldVars> {
        let h = b.linear(g, features, self.w1, self.b1)?;
        let h = g.gelu(h);
        let raw = b.linear(g, h, self.w2, self.b2)?;
        let s = g.slice(raw, 1, 0, 1)?;
        let c = g.slice(raw, 1, 1, 3)?;
        Ok(FieldVars { sigma: g.softplus(s), rgb: g.sigmoid(c) })
    }
}

/// Density and color at `n × 3` points.
pub fn radiance_field<T: Scalar>(
    g: &mut Graph<T>,
    planes: &[Var; 3],
    mlp: &RadianceMlp,
    b: &Bound,
    points: Var,
) -> Result<FieldVars> {
    let f = query_features(g, planes, points)?;
    mlp.forward(g, b, f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub res: usize,
    /// Stratified samples per ray.
    pub coarse: usize,
    /// Importance samples per ray; zero skips the coarse pass entirely.
    pub fine: usize,
    /// Jitter seed; `None` uses bin midpoints and CDF quantiles.
    pub seed: Option<u64>,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { res: 64, coarse: 8, fine: 8, seed: Some(0), background: [0.0; 3] }
    }
}

impl RenderSettings {
    pub fn samples(&self) -> usize {
        self.coarse + self.fine
    }
}

/// Graph outputs of [`render_graph`].
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `res × res × 3`
    pub image: Var,
    /// `res × res`
    pub depth: Var,
    /// Densities at every differentiable sample, `(res²·samples) × 1`.
    pub sigma: Var,
}

fn points_along<T: Scalar>(rays: &RayBatch, depths: &[f64], per_ray: usize) -> Tensor<T> {
    let mut pts = Vec::with_capacity(depths.len() * 3);
    for (r, ts) in depths.chunks(per_ray).enumerate() {
        let o = rays.origins[r];
        let d = rays.directions[r];
        for &t in ts {
            for k in 0..3 {
                pts.push(T::of(o[k] + t * d[k]));
            }
        }
    }
    Tensor::from_fn(&[depths.len(), 3], |i| pts[i])
}

/// Per-ray sample depths: stratified, then refined by importance sampling
/// against a forward-only evaluation of the field.
fn sample_depths<T: Scalar>(
    g: &Graph<T>,
    planes: &[Var; 3],
    mlp: &RadianceMlp,
    b: &Bound,
    camera: &Camera,
    rays: &RayBatch,
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    let nc = settings.coarse;
    let mut rngs: Vec<_> = match settings.seed {
        Some(seed) => (0..rays.len()).map(|i| Some(seeding::rng(seed, &[i as u64]))).collect(),
        None => (0..rays.len()).map(|_| None).collect(),
    };
    let coarse: Vec<f64> =
        rngs.iter_mut().flat_map(|r| stratified_samples(nc, camera.near, camera.far, r.as_mut())).collect();
    if settings.fine == 0 {
        return Ok(coarse);
    }

    let mut scratch = Graph::<T>::new();
    let sp = planes.map(|p| scratch.constant(g.value(p).clone()));
    let mut vars = b.vars().to_vec();
    for id in mlp.ids() {
        vars[id.0] = scratch.constant(g.value(b.var(id)).clone());
    }
    let sb = Bound(vars);
    let pts = scratch.constant(points_along(rays, &coarse, nc));
    let field = radiance_field(&mut scratch, &sp, mlp, &sb, pts)?;
    let sigma = scratch.value(field.sigma).data();
    let zeros = vec![T::zero(); 3 * nc];

    let w = (camera.far - camera.near) / nc as f64;
    let edges: Vec<f64> = (0..=nc).map(|i| camera.near + i as f64 * w).collect();
    let far = T::of(camera.far);
    let mut out = Vec::with_capacity(rays.len() * settings.samples());
    for (r, rng) in rngs.iter_mut().enumerate() {
        let ts = &coarse[r * nc..(r + 1) * nc];
        let tt: Vec<T> = ts.iter().map(|&t| T::of(t)).collect();
        let (_, _, weights, _) = composite_ray(&sigma[r * nc..(r + 1) * nc], &zeros, &tt, far, [T::zero(); 3]);
        let wf: Vec<f64> = weights.iter().map(|w| w.as_f64()).collect();
        let fine = importance_samples(&edges, &wf, settings.fine, rng.as_mut());
        out.extend(merge_depths(ts, &fine));
    }
    Ok(out)
}

/// Renders the field held by `planes` from `camera`.
pub fn render_graph<T: Scalar>(
    g: &mut Graph<T>,
    planes: &[Var; 3],
    mlp: &RadianceMlp,
    b: &Bound,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderVars> {
    camera.validate()?;
    if settings.coarse == 0 {
        return Err(Error::config("at least one coarse sample per ray is required"));
    }
    let res = settings.res;
    let rays = camera.generate_rays(res)?;
    let depths = sample_depths(g, planes, mlp, b, camera, &rays, settings)?;
    let per_ray = settings.samples();
    let pts = g.constant(points_along(&rays, &depths, per_ray));
    let field = radiance_field(g, planes, mlp, b, pts)?;
    let t: Vec<T> = depths.iter().map(|&t| T::of(t)).collect();
    let bg = settings.background.map(T::of);
    let out = g.composite(field.sigma, field.rgb, &t, per_ray, T::of(camera.far), bg)?;
    let image = g.slice(out, 1, 0, 3)?;
    let image = g.reshape(image, &[res, res, 3])?;
    let depth = g.slice(out, 1, 3, 1)?;
    let depth = g.reshape(depth, &[res, res])?;
    Ok(RenderVars { image, depth, sigma: field.sigma })
}

/// Forward-only render returning `(image, depth)`.
pub fn render<T: Scalar>(
    triplane: &Triplane<T>,
    mlp: &RadianceMlp,
    store: &ParamStore<T>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let planes = triplane.planes.clone().map(|p| g.constant(p));
    let out = render_graph(&mut g, &planes, mlp, &b, camera, settings)?;
    Ok((g.value(out.image).clone(), g.value(out.depth).clone()))
}
