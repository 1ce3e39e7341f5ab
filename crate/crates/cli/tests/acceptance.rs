//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as part of `cargo test`. Pass criterion numbers to run a subset:
//! `cargo test -p shapeprior-cli --test acceptance -- 1 8`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;

use shapeprior_cli::run as cli;
use shapeprior_core::diffmath::composite_ray;
use shapeprior_core::evalkit::{ablate, pretrain_teacher, AblationConfig, AblationTable, PretrainConfig};
use shapeprior_core::gradsuite;
use shapeprior_core::renderer::{stratified_samples, Camera};
use shapeprior_core::scenegen::{
    render_scene, Dataset, DatasetInfo, Geometry, Item, ItemSpec, Primitive, SceneSpec, Texture,
};
use shapeprior_core::seeding;
use shapeprior_core::trainer::{self, Checkpoint, StepLog, TrainConfig, TrainedModel, Trainer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Pass flag and a one-line account of the measured values.
type Verdict = Result<(bool, String)>;

type GridCheck = (u32, &'static str, fn(&Grid) -> Verdict);

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn argv(args: &[&str]) -> i32 {
    cli(std::iter::once("shapeprior").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let checks = gradsuite::run_suite()?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.1e} >= {:.0e})", c.component, c.error, c.threshold))
        .collect();
    let has = |name: &str| checks.iter().any(|c| c.component.contains(name));
    let required = ["matmul", "composite", "radiance_mlp", "render_4x4_to_loss", "image_to_loss_pipeline"];
    let missing: Vec<&str> = required.into_iter().filter(|n| !has(n)).collect();
    let worst_prim =
        checks.iter().filter(|c| c.threshold == gradsuite::PRIMITIVE_THRESHOLD).map(|c| c.error).fold(0.0, f64::max);
    let worst_e2e =
        checks.iter().filter(|c| c.threshold == gradsuite::END_TO_END_THRESHOLD).map(|c| c.error).fold(0.0, f64::max);
    let pass = failed.is_empty() && missing.is_empty() && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{} checks, worst primitive {worst_prim:.1e} (< 1e-5), worst end-to-end {worst_e2e:.1e} (< 1e-4), {:.1} s (< 120 s)",
        checks.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail += &format!("; failed: {}", failed.join(", "));
    }
    if !missing.is_empty() {
        detail += &format!("; missing: {}", missing.join(", "));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------- 2

/// A wall facing the camera with a patterned texture.
fn wall_item(res: usize, camera: &Camera) -> Result<Item> {
    let spec = SceneSpec {
        primitives: vec![Primitive {
            geometry: Geometry::Box { center: [0.0, 0.0, 0.3], half: [4.0, 4.0, 0.1] },
            texture: Texture::of_class(2, &mut seeding::rng(3, &[])),
        }],
        shape_class: 0,
        texture_class: 2,
        seed: 0,
    };
    let (image, depth) = render_scene(&spec, camera, res)?;
    Ok(Item { spec: ItemSpec { idx: 0, shape_class: 0, texture_class: 2, seed: 0 }, image, depth })
}

fn overfit_config(res: usize) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&repo_path("configs/ablation.cfg"))?;
    cfg.batch = 1;
    cfg.lr = 1e-3;
    cfg.epochs = 500;
    cfg.max_steps = 500;
    cfg.render_res = res;
    cfg.from_scratch = true;
    cfg.augment = false;
    cfg.checkpoint_every = 0;
    Ok(cfg)
}

fn rendering_oracles() -> Verdict {
    let t = Instant::now();
    let camera = Camera::default();

    // (a) weights plus residual transmittance sum to one.
    let mut rng = seeding::rng(21, &[]);
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let mut ts: Vec<f64> = (0..n).map(|_| rng.gen_range(camera.near..camera.far)).collect();
        ts.sort_by(f64::total_cmp);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let sigma: Vec<f64> = (0..n).map(|_| scale * rng.gen::<f64>()).collect();
        let rgb: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
        let (_, _, w, tres) = composite_ray(&sigma, &rgb, &ts, camera.far, [0.0; 3]);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() + tres - 1.0).abs());
    }
    let a = worst_sum <= 1e-6;

    // (b) a homogeneous slab between two planes inside [near, far], with
    // jittered samples over the whole ray, against Beer-Lambert.
    let n = 256;
    let (lo, hi) = (2.2, 3.2);
    let mut worst_slab = 0.0f64;
    for sigma in [0.25, 0.5, 1.0, 2.0] {
        for _ in 0..20 {
            let ts = stratified_samples(n, camera.near, camera.far, Some(&mut rng));
            let dens: Vec<f64> = ts.iter().map(|&t| if (lo..hi).contains(&t) { sigma } else { 0.0 }).collect();
            let (_, _, _, tres) = composite_ray(&dens, &vec![0.5; 3 * n], &ts, camera.far, [0.0; 3]);
            let want = (-sigma * (hi - lo)).exp();
            worst_slab = worst_slab.max((tres - want).abs() / want);
        }
    }
    let b = worst_slab < 0.02;

    // (c) overfit a fronto-parallel wall and compare rendered depth.
    let res = 32;
    let item = wall_item(res, &camera)?;
    let info =
        DatasetInfo { items: 1, seed: 0, resolution: res, val_items: 0, texture_correlation: 1.0, cue_conflict: false };
    let ds = Dataset { info, items: vec![item.clone()] };
    let mut tr = Trainer::new(overfit_config(res)?, &ds, None)?;
    while !tr.is_done() {
        tr.train_step()?;
    }
    let model = TrainedModel::from_checkpoint(&tr.checkpoint())?;
    let (_, depth) = model.reconstruct(&item.image, None)?;
    ensure!(depth.shape() == item.depth.shape(), "depth shape {:?}", depth.shape());
    let errs: Vec<f64> = depth.data().iter().zip(item.depth.data()).map(|(a, b)| (a - b).abs() as f64).collect();
    let max_err = errs.iter().copied().fold(0.0, f64::max);
    let mean_err = errs.iter().sum::<f64>() / errs.len() as f64;
    let tol = (camera.far - camera.near) / 16.0;
    let c = max_err <= tol;

    let elapsed = t.elapsed();
    let pass = a && b && c && elapsed < Duration::from_secs(600);
    Ok((
        pass,
        format!(
            "(a) max |sum w + T - 1| = {worst_sum:.1e} (<= 1e-6); (b) worst slab error {:.2}% (< 2%); \
             (c) wall depth error max {max_err:.4} mean {mean_err:.4} (<= {tol:.4}); {}",
            100.0 * worst_slab,
            minutes(elapsed)
        ),
    ))
}

// ---------------------------------------------------------------- 3

/// Steps averaged at the end of the smoke run; single batches are noisy.
const SMOKE_TAIL: usize = 50;

fn training_smoke(work: &Path) -> Verdict {
    let t = Instant::now();
    let mut cfg = TrainConfig::load(&repo_path("configs/paper-defaults.cfg"))?;
    cfg.max_steps = 1000;
    cfg.epochs = 1000;
    cfg.checkpoint_every = 0;
    // Half the default batch keeps 1,000 steps inside the time budget.
    cfg.batch = 8;
    ensure!(
        cfg.weights.rgb == 0.1 && cfg.weights.depth == 1.0 && cfg.weights.dist == 1.0 && cfg.weights.norm == 1e-3,
        "loss weights drifted from the published constants"
    );
    ensure!(cfg.lr == 1e-4 && cfg.coarse_samples + cfg.fine_samples == 16 && cfg.render_res == 64);

    let ds = Dataset::generate(256, 1, 64, 0.0, 0.8, &Camera::default())?;
    let teacher = pretrain_teacher(
        ds.train(),
        &PretrainConfig { encoder: cfg.encoder.clone(), epochs: 2, ..Default::default() },
        |_, _| {},
    )?;
    let mut tr = Trainer::new(cfg, &ds, Some(teacher))?;
    let mut logs: Vec<StepLog> = Vec::new();
    let outcome = trainer::run(&mut tr, &work.join("smoke"), |l| logs.push(l.clone()));
    let elapsed = t.elapsed();
    if let Err(e) = outcome {
        return Ok((false, format!("training aborted after {} steps: {e}", logs.len())));
    }
    ensure!(logs.len() == 1000, "ran {} steps", logs.len());
    let finite = logs.iter().all(|l| {
        let r = &l.report;
        [r.rgb, r.depth, r.dist, r.norm, r.total].iter().all(|v| v.is_finite())
    });
    let tail = &logs[logs.len() - SMOKE_TAIL..];
    let mean = |f: fn(&StepLog) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    let (rgb0, depth0) = (logs[0].report.rgb, logs[0].report.depth);
    let (rgb1, depth1) = (mean(|l| l.report.rgb), mean(|l| l.report.depth));
    let drop = |a: f64, b: f64| 1.0 - b / a;
    let pass =
        finite && drop(rgb0, rgb1) >= 0.5 && drop(depth0, depth1) >= 0.5 && elapsed < Duration::from_secs(30 * 60);
    Ok((
        pass,
        format!(
            "rgb {rgb0:.4} -> {rgb1:.4} (-{:.0}%), depth {depth0:.4} -> {depth1:.4} (-{:.0}%), \
             final = mean of last {SMOKE_TAIL} steps, all finite: {finite}, {} (< 30 min)",
            100.0 * drop(rgb0, rgb1),
            100.0 * drop(depth0, depth1),
            minutes(elapsed)
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn tree(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(work: &Path) -> Verdict {
    let dir = work.join("determinism");
    let gen = |name: &str, seed: &str| {
        let out = dir.join(name);
        let code =
            argv(&["gen-data", "--n", "48", "--seed", seed, "--res", "32", "--out", s(&out), "--cue-conflict", "16"]);
        ensure!(code == 0, "gen-data exited {code}");
        Ok(out)
    };
    let (a, b, c) = (gen("a", "5")?, gen("b", "5")?, gen("c", "6")?);
    let (ta, tb, tc) = (tree(&a)?, tree(&b)?, tree(&c)?);
    let data_same = ta == tb && ta.len() > 100;
    let data_differs = ta != tc;

    let cfg = repo_path("configs/ablation.cfg");
    let teacher = dir.join("teacher");
    ensure!(
        argv(&["pretrain-teacher", "--config", s(&cfg), "--data", s(&a), "--out", s(&teacher), "--epochs", "2"]) == 0
    );
    let teacher = teacher.join("teacher.tpck");
    // 36 training items at batch 8: checkpoint 10 falls mid-epoch.
    let train = |out: &Path, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&a),
            "--teacher",
            s(&teacher),
            "--out",
            s(out),
            "-q",
            "--set",
            "max_steps=20",
            "--set",
            "checkpoint_every=10",
        ];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        let code = argv(&args);
        ensure!(code == 0, "train exited {code}");
        Ok(fs::read(out.join("final.tpck"))?)
    };
    let full = train(&dir.join("full"), None)?;
    let mid = dir.join("full/ckpt_000010.tpck");
    ensure!(Checkpoint::load(&mid)?.step == 10, "mid-run checkpoint has the wrong step");
    let resumed = train(&dir.join("resumed"), Some(&mid))?;
    let resume_same = full == resumed;

    Ok((
        data_same && data_differs && resume_same,
        format!(
            "gen-data identical per seed: {data_same} ({} files), differs across seeds: {data_differs}; \
             resumed final checkpoint byte-identical: {resume_same} ({} bytes)",
            ta.len(),
            full.len()
        ),
    ))
}

// ---------------------------------------------------------------- 4-7, 9

struct Grid {
    table: AblationTable,
    elapsed: Duration,
}

impl Grid {
    fn mean(&self, variant: &str, metric: &str) -> Result<f64> {
        self.table.mean(variant, metric).with_context(|| format!("no {metric} for {variant}"))
    }
}

fn ablation_grid() -> Result<Grid> {
    let t = Instant::now();
    let camera = Camera::default();
    let base = TrainConfig::load(&repo_path("configs/ablation.cfg"))?;
    let ds = Dataset::generate(256, 11, 32, 0.25, 0.8, &camera)?;
    // Same scenes as `gen-data --seed 11 --res 32 --cue-conflict 128`.
    let cue = Dataset::generate_cue_conflict(128, 11u64.wrapping_add(0x9e37_79b9_7f4a_7c15), 32, &camera)?;
    let teacher = pretrain_teacher(
        ds.train(),
        &PretrainConfig { encoder: base.encoder.clone(), epochs: 15, batch: 16, lr: 1e-3, seed: 0, augment: true },
        |_, _| {},
    )?;
    let cfg = AblationConfig::new(base);
    let table = ablate(&cfg, &ds, &cue, &teacher, None, |_| {})?;
    if !table.failures.is_empty() {
        bail!("ablation runs failed: {:?}", table.failures);
    }
    println!("{}", table.summary());
    Ok(Grid { table, elapsed: t.elapsed() })
}

fn distillation(g: &Grid) -> Verdict {
    let (pf, pn) = (g.mean("full", "probe_acc")?, g.mean("no_dist", "probe_acc")?);
    let (df, dn) = (g.mean("full", "feature_drift")?, g.mean("no_dist", "feature_drift")?);
    Ok((
        pf >= pn && dn > df,
        format!(
            "probe full {pf:.4} >= no_dist {pn:.4}; drift no_dist {dn:.4} > full {df:.4} (3 seeds, grid {})",
            minutes(g.elapsed)
        ),
    ))
}

fn triplane(g: &Grid) -> Verdict {
    let (f, n) = (g.mean("full", "robust_texture_swap")?, g.mean("no_triplane", "robust_texture_swap")?);
    Ok((f >= n, format!("texture-swap probe accuracy full {f:.4} >= no_triplane {n:.4}")))
}

fn shape_bias(g: &Grid) -> Verdict {
    let (f, t) = (g.mean("full", "shape_bias")?, g.mean("teacher", "shape_bias")?);
    Ok((f >= t, format!("cue-conflict shape bias full {f:.4} >= teacher {t:.4}")))
}

fn from_scratch(g: &Grid) -> Verdict {
    let (s, t) = (g.mean("from_scratch", "probe_acc")?, g.mean("teacher", "probe_acc")?);
    Ok((s < t, format!("probe from_scratch {s:.4} < teacher {t:.4}")))
}

fn data_amount(g: &Grid) -> Verdict {
    let probes =
        ["data_1_16", "data_1_4", "full"].iter().map(|v| g.mean(v, "probe_acc")).collect::<Result<Vec<f64>>>()?;
    let spread = probes.iter().copied().fold(f64::MIN, f64::max) - probes.iter().copied().fold(f64::MAX, f64::min);
    let gap = g.mean("full", "probe_acc")? - g.mean("no_dist", "probe_acc")?;
    Ok((
        spread < gap,
        format!(
            "probe at 1/16, 1/4, 1: {:.4} {:.4} {:.4}, spread {spread:.4} < full - no_dist {gap:.4}",
            probes[0], probes[1], probes[2]
        ),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| selected.is_empty() || selected.contains(&id);
    let work = tempfile::tempdir().expect("temp dir");
    let mut lines: Vec<(u32, &str, Verdict)> = Vec::new();

    if want(1) {
        lines.push((1, "gradient suite", gradient_suite()));
    }
    if want(2) {
        lines.push((2, "rendering oracles", rendering_oracles()));
    }
    if want(3) {
        lines.push((3, "training smoke", training_smoke(work.path())));
    }
    if [4, 5, 6, 7, 9].into_iter().any(want) {
        let grid = ablation_grid();
        let checks: [GridCheck; 5] = [
            (4, "distillation direction", distillation),
            (5, "triplane direction", triplane),
            (6, "shape bias direction", shape_bias),
            (7, "from-scratch direction", from_scratch),
            (9, "data amount direction", data_amount),
        ];
        for (id, name, f) in checks.into_iter().filter(|c| want(c.0)) {
            let r = match &grid {
                Ok(g) => f(g),
                Err(e) => Err(anyhow::anyhow!("ablation grid: {e:#}")),
            };
            lines.push((id, name, r));
        }
    }
    if want(8) {
        lines.push((8, "determinism", determinism(work.path())));
    }

    lines.sort_by_key(|l| l.0);
    let mut failed = 0;
    println!();
    for (id, name, r) in &lines {
        let (pass, detail) = match r {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("\nacceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
