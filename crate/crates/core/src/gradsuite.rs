//! Gradient checks of every differentiable component against central
//! differences in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{check_gradients, Graph, Tensor, Var};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::objective::{self, LossTerms, LossWeights};
use crate::params::{Bound, ParamId, ParamStore};
use crate::renderer::{radiance_field, render_graph, Camera, RadianceMlp, RenderSettings};
use crate::seeding;
use crate::trainer::{Model, Prepared, TrainConfig};
use crate::triplane::TriplaneConfig;

const STEP: f64 = 1e-5;

/// Bound for single primitives and loss terms.
pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
/// Bound for composed pipelines.
pub const END_TO_END_THRESHOLD: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(out), 0.5, 1.5);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type ScalarFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Relative gradient error of every differentiable primitive.
pub fn primitive_checks() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let mut check = |name: &'static str, pts: Vec<Tensor<f64>>, f: ScalarFn| {
        out.push((name, check_gradients(|g, v| f(g, v), &pts, STEP)));
    };

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    check("matmul", vec![a.clone(), b], &|g, v| {
        let m = g.matmul(v[0], v[1])?;
        project(g, m, 1)
    });
    let c = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check("add", vec![a.clone(), c.clone()], &|g, v| {
        let m = g.add(v[0], v[1])?;
        project(g, m, 2)
    });
    check("sub", vec![a.clone(), c.clone()], &|g, v| {
        let m = g.sub(v[0], v[1])?;
        project(g, m, 3)
    });
    check("mul", vec![a.clone(), c.clone()], &|g, v| {
        let m = g.mul(v[0], v[1])?;
        project(g, m, 4)
    });
    let bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    check("add_bias", vec![a.clone(), bias.clone()], &|g, v| {
        let m = g.add_bias(v[0], v[1])?;
        project(g, m, 5)
    });
    check("affine", vec![a.clone()], &|g, v| {
        let m = g.affine(v[0], -1.7, 0.3);
        project(g, m, 6)
    });
    check("exp", vec![a.clone()], &|g, v| {
        let m = g.exp(v[0]);
        project(g, m, 7)
    });
    check("sigmoid", vec![a.clone()], &|g, v| {
        let m = g.sigmoid(v[0]);
        project(g, m, 8)
    });
    check("softplus", vec![a.clone()], &|g, v| {
        let m = g.softplus(v[0]);
        project(g, m, 9)
    });
    // Keep relu inputs away from the kink.
    let away = Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    check("relu", vec![away], &|g, v| {
        let m = g.relu(v[0]);
        project(g, m, 10)
    });
    check("gelu", vec![a.clone()], &|g, v| {
        let m = g.gelu(v[0]);
        project(g, m, 11)
    });
    check("softmax", vec![a.clone()], &|g, v| {
        let m = g.softmax(v[0]);
        project(g, m, 12)
    });
    let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    check("layer_norm", vec![a.clone(), gamma, bias.clone()], &|g, v| {
        let m = g.layer_norm(v[0], v[1], v[2])?;
        project(g, m, 13)
    });
    check("sum", vec![a.clone()], &|g, v| {
        let s = g.sum(v[0]);
        let s2 = g.mul(s, s)?;
        Ok(s2)
    });
    check("mean", vec![a.clone()], &|g, v| {
        let s = g.mean(v[0]);
        let e = g.exp(s);
        Ok(e)
    });
    check("concat", vec![a.clone(), c.clone()], &|g, v| {
        let m = g.concat(&[v[0], v[1]], 1)?;
        let m2 = g.concat(&[m, v[0]], 1)?;
        let sq = g.mul(m2, m2)?;
        project(g, sq, 14)
    });
    check("slice", vec![a.clone()], &|g, v| {
        let s = g.slice(v[0], 1, 1, 2)?;
        let sq = g.mul(s, s)?;
        project(g, sq, 15)
    });
    check("reshape", vec![a.clone()], &|g, v| {
        let r = g.reshape(v[0], &[2, 6])?;
        let sq = g.mul(r, r)?;
        project(g, sq, 16)
    });
    let img = rand_tensor(&mut rng, &[4, 5, 2], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
    let cb = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    check("conv3x3", vec![img.clone(), w, cb], &|g, v| {
        let m = g.conv3x3(v[0], v[1], v[2])?;
        project(g, m, 17)
    });
    check("upsample2x", vec![img.clone()], &|g, v| {
        let m = g.upsample2x(v[0])?;
        let sq = g.mul(m, m)?;
        project(g, sq, 18)
    });
    check("mse", vec![a.clone(), c.clone()], &|g, v| g.mse(v[0], v[1]));
    // Offsets bounded away from zero keep |a − c| differentiable.
    let shifted = Tensor::from_fn(&[3, 4], |i| a.data()[i] + if i % 2 == 0 { 0.5 } else { -0.5 });
    check("mae", vec![shifted, a.clone()], &|g, v| g.mae(v[0], v[1]));
    let plane = rand_tensor(&mut rng, &[5, 5, 3], -1.0, 1.0);
    let coords = rand_tensor(&mut rng, &[6, 2], -0.95, 0.95);
    check("bilinear_sample", vec![plane, coords], &|g, v| {
        let m = g.bilinear_sample(v[0], v[1])?;
        project(g, m, 19)
    });
    let q = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let val = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    check("attention", vec![q, k, val], &|g, v| {
        let m = g.attention(v[0], v[1], v[2], 2)?;
        project(g, m, 20)
    });
    check("cross_entropy", vec![a.clone()], &|g, v| g.cross_entropy(v[0], &[1, 3, 0]));
    let sigma = rand_tensor(&mut rng, &[2, 4], 0.1, 2.0);
    let rgb = rand_tensor(&mut rng, &[2, 4, 3], 0.0, 1.0);
    let t = [1.0, 1.3, 1.9, 2.2, 1.1, 1.2, 2.5, 2.9];
    check("composite", vec![sigma, rgb], &|g, v| {
        let m = g.composite(v[0], v[1], &t, 4, 3.0, [0.1, 0.2, 0.3])?;
        project(g, m, 21)
    });
    out.into_iter().map(|(n, r)| r.map(|e| (n, e))).collect()
}

/// One row of the suite.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub component: String,
    pub error: f64,
    pub threshold: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < self.threshold
    }
}

/// Replaces the bound variables of `ids` by `vars`.
fn rebind(store: &ParamStore<f64>, g: &mut Graph<f64>, ids: &[ParamId], vars: &[Var]) -> Bound {
    let mut all = store.bind(g, false).vars().to_vec();
    for (id, v) in ids.iter().zip(vars) {
        all[id.0] = *v;
    }
    Bound(all)
}

fn field_fixture() -> Result<(ParamStore<f64>, RadianceMlp, [Tensor<f64>; 3])> {
    let mut store = ParamStore::new();
    let mut rng = seeding::rng(6, &[]);
    let mlp = RadianceMlp::new(4, 6, &mut store, "mlp/", &mut rng)?;
    let planes = [0, 1, 2].map(|_| rand_tensor(&mut rng, &[4, 4, 4], -1.0, 1.0));
    Ok((store, mlp, planes))
}

/// Radiance MLP parameters through density and color at fixed points.
pub fn radiance_mlp_check() -> Result<f64> {
    let (store, mlp, planes) = field_fixture()?;
    let ids = mlp.ids();
    let points: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    check_gradients(
        |g, vars| {
            let b = rebind(&store, g, &ids, vars);
            let planes = planes.clone().map(|p| g.constant(p));
            let pts = g.constant(Tensor::from_fn(&[12, 3], |i| (i as f64 * 0.61).cos()));
            let f = radiance_field(g, &planes, &mlp, &b, pts)?;
            let s = project(g, f.sigma, 31)?;
            let c = project(g, f.rgb, 32)?;
            g.add(s, c)
        },
        &points,
        STEP,
    )
}

/// Planes and MLP through a 4×4 render into reconstruction, depth and
/// density losses. Fine sampling is off: importance-sampled depths are
/// treated as constants, which finite differences would not respect.
pub fn render_to_loss_check() -> Result<f64> {
    let (store, mlp, planes) = field_fixture()?;
    let ids = mlp.ids();
    let settings = RenderSettings { res: 4, coarse: 3, fine: 0, seed: None, background: [0.0; 3] };
    let target_img = Tensor::<f64>::from_fn(&[4, 4, 3], |i| (i as f64 * 0.13).sin().abs());
    let target_depth = Tensor::<f64>::from_fn(&[4, 4], |i| 2.0 + 0.1 * i as f64);
    let mut points: Vec<Tensor<f64>> = planes.to_vec();
    points.extend(ids.iter().map(|&id| store.get(id).clone()));
    check_gradients(
        |g, vars| {
            let p = [vars[0], vars[1], vars[2]];
            let b = rebind(&store, g, &ids, &vars[3..]);
            let out = render_graph(g, &p, &mlp, &b, &Camera::default(), &settings)?;
            let ti = g.constant(target_img.clone());
            let td = g.constant(target_depth.clone());
            let rgb = objective::rgb_loss(g, ti, out.image)?;
            let depth = objective::depth_loss(g, td, out.depth)?;
            let norm = objective::density_norm_loss(g, out.sigma)?;
            let terms = LossTerms { rgb, depth, dist: None, norm: Some(norm) };
            Ok(objective::total_loss(g, &terms, &LossWeights::default())?.0)
        },
        &points,
        STEP,
    )
}

/// Each loss term on its own, then their weighted sum.
pub fn loss_checks() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let img = rand_tensor(&mut rng, &[3, 3, 3], 0.0, 1.0);
    let img_t = rand_tensor(&mut rng, &[3, 3, 3], 0.0, 1.0);
    let dep = rand_tensor(&mut rng, &[3, 3], 1.7, 3.7);
    let dep_t = rand_tensor(&mut rng, &[3, 3], 1.7, 3.7);
    let feat = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let feat_t = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let sigma = rand_tensor(&mut rng, &[10, 1], 0.05, 3.0);
    let mut out = Vec::new();
    let (a, b) = (img_t.clone(), dep_t.clone());
    out.push((
        "rgb_loss",
        check_gradients(
            |g, v| {
                let t = g.constant(a.clone());
                objective::rgb_loss(g, t, v[0])
            },
            std::slice::from_ref(&img),
            STEP,
        )?,
    ));
    out.push((
        "depth_loss",
        check_gradients(
            |g, v| {
                let t = g.constant(b.clone());
                objective::depth_loss(g, t, v[0])
            },
            std::slice::from_ref(&dep),
            STEP,
        )?,
    ));
    let c = feat_t.clone();
    out.push((
        "distillation_loss",
        check_gradients(
            |g, v| {
                let t = g.constant(c.clone());
                objective::distillation_loss(g, v[0], t)
            },
            std::slice::from_ref(&feat),
            STEP,
        )?,
    ));
    out.push((
        "density_norm_loss",
        check_gradients(|g, v| objective::density_norm_loss(g, v[0]), std::slice::from_ref(&sigma), STEP)?,
    ));
    let w = LossWeights::default();
    out.push((
        "total_loss",
        check_gradients(
            |g, v| {
                let (ti, td, tf) = (g.constant(img_t.clone()), g.constant(dep_t.clone()), g.constant(feat_t.clone()));
                let rgb = objective::rgb_loss(g, ti, v[0])?;
                let depth = objective::depth_loss(g, td, v[1])?;
                let dist = objective::distillation_loss(g, v[2], tf)?;
                let norm = objective::density_norm_loss(g, v[3])?;
                let terms = LossTerms { rgb, depth, dist: Some(dist), norm: Some(norm) };
                Ok(objective::total_loss(g, &terms, &w)?.0)
            },
            &[img, dep, feat, sigma],
            STEP,
        )?,
    ));
    Ok(out)
}

/// Image through encoder, triplane decoder and renderer into the full
/// objective, checked against a sample of parameters from every stage.
pub fn pipeline_check() -> Result<f64> {
    let cfg = TrainConfig {
        render_res: 4,
        coarse_samples: 3,
        fine_samples: 0,
        encoder: EncoderConfig { image_size: 8, patch_size: 4, depth: 4, width: 4, heads: 2 },
        triplane: TriplaneConfig { low_res: 2, res: 4, channels: 3, emb_dim: 4, heads: 2 },
        mlp_hidden: 4,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeding::rng(8, &[]);
    let model = Model::new(&cfg, &mut store, &mut rng)?;
    // Larger-than-init encoder weights keep every checked gradient well
    // above the rounding floor of the difference quotient.
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.name(id).starts_with("enc/") && store.get(id).shape().len() == 2 {
            for v in store.get_mut(id).data_mut() {
                *v *= 15.0;
            }
        }
    }
    let names = ["enc/patch.b", "enc/block3.fc2.b", "enc/norm.g", "dec/xi", "dec/out.b", "mlp/w2", "mlp/b2"];
    let ids: Vec<ParamId> = names
        .iter()
        .map(|n| store.id(n).ok_or_else(|| crate::Error::contract(format!("no parameter {n}"))))
        .collect::<Result<_>>()?;
    let points: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let prepared = Prepared {
        input: rand_tensor(&mut rng, &[8, 8, 3], 0.0, 1.0),
        target_rgb: rand_tensor(&mut rng, &[4, 4, 3], 0.0, 1.0),
        target_depth: rand_tensor(&mut rng, &[4, 4], 1.7, 3.7),
    };
    let teacher = rand_tensor(&mut rng, &[cfg.encoder.tokens(), cfg.encoder.feature_dim()], -1.0, 1.0);
    let settings = cfg.render_settings(None);
    let camera = cfg.camera();
    check_gradients(
        |g, vars| {
            let b = rebind(&store, g, &ids, vars);
            let weights = LossWeights::default();
            Ok(model.item_loss(g, &b, &prepared, Some(&teacher), &weights, &camera, &settings)?.0)
        },
        &points,
        STEP,
    )
}

/// The whole suite in a fixed order.
pub fn run_suite() -> Result<Vec<GradCheck>> {
    let mut out: Vec<GradCheck> = primitive_checks()?
        .into_iter()
        .map(|(n, e)| GradCheck { component: n.to_string(), error: e, threshold: PRIMITIVE_THRESHOLD })
        .collect();
    out.push(GradCheck {
        component: "radiance_mlp".into(),
        error: radiance_mlp_check()?,
        threshold: PRIMITIVE_THRESHOLD,
    });
    for (n, e) in loss_checks()? {
        out.push(GradCheck { component: n.to_string(), error: e, threshold: PRIMITIVE_THRESHOLD });
    }
    out.push(GradCheck {
        component: "render_4x4_to_loss".into(),
        error: render_to_loss_check()?,
        threshold: END_TO_END_THRESHOLD,
    });
    out.push(GradCheck {
        component: "image_to_loss_pipeline".into(),
        error: pipeline_check()?,
        threshold: END_TO_END_THRESHOLD,
    });
    Ok(out)
}
