use super::*;
use crate::renderer::Camera;
use crate::triplane::TriplaneConfig;

fn tiny() -> TrainConfig {
    TrainConfig {
        batch: 2,
        lr: 1e-3,
        epochs: 2,
        coarse_samples: 4,
        fine_samples: 4,
        render_res: 8,
        encoder: EncoderConfig { image_size: 16, patch_size: 8, depth: 4, width: 8, heads: 2 },
        triplane: TriplaneConfig { low_res: 2, res: 8, channels: 4, emb_dim: 8, heads: 2 },
        mlp_hidden: 8,
        ..Default::default()
    }
}

fn data(n: usize) -> Dataset {
    Dataset::generate(n, 5, 16, 0.0, 1.0, &Camera::default()).unwrap()
}

fn teacher(cfg: &TrainConfig, seed: u64) -> FrozenEncoder {
    let mut store = ParamStore::new();
    Encoder::new(cfg.encoder.clone(), &mut store, ENCODER_PREFIX, &mut seeding::rng(seed, &[77])).unwrap();
    FrozenEncoder::from_store(&cfg.encoder, &store).unwrap()
}

fn mean_drift(student: &FrozenEncoder, teacher: &FrozenEncoder, items: &[Item]) -> f64 {
    let mut total = 0.0;
    for it in items {
        let a = student.grid(&it.image).unwrap();
        let b = teacher.grid(&it.image).unwrap();
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        total += d / a.numel() as f64;
    }
    total / items.len() as f64
}

#[test]
fn student_starts_at_teacher() {
    let cfg = tiny();
    let ds = data(8);
    let t = teacher(&cfg, 1);
    let tr = Trainer::new(cfg, &ds, Some(t.clone())).unwrap();
    assert_eq!(tr.student_encoder().unwrap().sha256(), t.sha256());
    let (epoch, batch) = tr.batch_for(0);
    let (_, rep) = tr.batch_gradients(&batch, epoch, 0).unwrap();
    assert_eq!(rep.dist, 0.0);
    assert!(rep.rgb > 0.0 && rep.depth > 0.0);
}

#[test]
fn from_scratch_drops_the_teacher() {
    let cfg = TrainConfig { from_scratch: true, ..tiny() };
    let ds = data(8);
    let t = teacher(&cfg, 1);
    let tr = Trainer::new(cfg.clone(), &ds, Some(t.clone())).unwrap();
    assert!(tr.teacher().is_none());
    assert_eq!(tr.config().effective_weights().dist, 0.0);
    assert_ne!(tr.student_encoder().unwrap().sha256(), t.sha256());
    // No teacher needed at all.
    Trainer::new(cfg, &ds, None).unwrap();
}

#[test]
fn missing_or_mismatched_teacher_is_a_config_error() {
    let ds = data(8);
    assert!(matches!(Trainer::new(tiny(), &ds, None), Err(Error::Config(_))));
    let mut other = tiny();
    other.encoder.width = 16;
    let t = teacher(&other, 1);
    assert!(matches!(Trainer::new(tiny(), &ds, Some(t)), Err(Error::Config(_))));
}

#[test]
fn teacher_is_frozen_and_skipped_without_distillation() {
    let ds = data(8);
    let cfg = TrainConfig { max_steps: 3, ..tiny() };
    let t = teacher(&cfg, 2);
    let before = t.sha256();
    let mut tr = Trainer::new(cfg.clone(), &ds, Some(t)).unwrap();
    for _ in 0..3 {
        tr.train_step().unwrap();
    }
    let teach = tr.teacher().unwrap();
    assert_eq!(teach.sha256(), before);
    assert_eq!(teach.forward_calls(), 6);
    assert_ne!(tr.student_encoder().unwrap().sha256(), before);

    let mut tr = Trainer::new(TrainConfig { no_dist: true, ..cfg }, &ds, Some(teacher(&tiny(), 2))).unwrap();
    for _ in 0..3 {
        let log = tr.train_step().unwrap();
        assert_eq!(log.report.dist, 0.0);
    }
    assert_eq!(tr.teacher().unwrap().forward_calls(), 0);
}

fn assert_all_gradients_nonzero(cfg: TrainConfig) {
    let ds = data(8);
    let tr = Trainer::new(cfg, &ds, None).unwrap();
    let (epoch, batch) = tr.batch_for(0);
    let (grads, _) = tr.batch_gradients(&batch, epoch, 0).unwrap();
    for (id, g) in tr.store().ids().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "parameter `{}` got no gradient", tr.store().name(id));
    }
}

#[test]
fn every_parameter_gets_a_gradient() {
    assert_all_gradients_nonzero(TrainConfig { from_scratch: true, ..tiny() });
}

#[test]
fn every_conv_decoder_parameter_gets_a_gradient() {
    assert_all_gradients_nonzero(TrainConfig { from_scratch: true, no_triplane: true, ..tiny() });
}

#[test]
fn conv_decoder_depth_stays_in_range() {
    let cfg = TrainConfig { from_scratch: true, no_triplane: true, ..tiny() };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut seeding::rng(0, &[])).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let img = Tensor::full(&[16, 16, 3], 0.5f32);
    let cam = cfg.camera();
    let out = model.forward(&mut g, &b, &img, &cam, &cfg.render_settings(None)).unwrap();
    assert_eq!(g.shape(out.image), &[8, 8, 3]);
    assert!(out.sigma.is_none());
    let d = g.value(out.depth);
    assert!(d.data().iter().all(|&v| v as f64 >= cam.near && v as f64 <= cam.far));
}

#[test]
fn epochs_visit_each_item_once() {
    let ds = data(10);
    let cfg = TrainConfig { batch: 3, from_scratch: true, ..tiny() };
    let tr = Trainer::new(cfg, &ds, None).unwrap();
    assert_eq!(tr.steps_per_epoch(), 4);
    assert_eq!(tr.total_steps(), 8);
    for epoch in 0..2 {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| tr.batch_for(epoch * 4 + s).1).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
    assert_ne!(tr.batch_for(0).1, tr.batch_for(4).1);
}

#[test]
fn data_fraction_selects_floor_of_items() {
    let ds = data(16);
    let cfg = TrainConfig { data_fraction: 0.25, from_scratch: true, ..tiny() };
    let a = Trainer::new(cfg.clone(), &ds, None).unwrap();
    assert_eq!(a.items().len(), 4);
    let b = Trainer::new(cfg.clone(), &ds, None).unwrap();
    assert_eq!(a.items(), b.items());
    let c = Trainer::new(TrainConfig { seed: 9, ..cfg.clone() }, &ds, None).unwrap();
    assert_ne!(a.items(), c.items());
    let none = TrainConfig { data_fraction: 0.05, ..cfg };
    assert!(matches!(Trainer::new(none, &ds, None), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_parameters() {
    let ds = data(8);
    let cfg = TrainConfig { max_steps: 10, from_scratch: true, ..tiny() };
    let run = || {
        let mut tr = Trainer::new(cfg.clone(), &ds, None).unwrap();
        while !tr.is_done() {
            tr.train_step().unwrap();
        }
        tr.checkpoint().encode()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_mid_epoch_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(8);
    let t = teacher(&tiny(), 3);
    // 4 steps per epoch; the checkpoint at step 6 falls mid-epoch.
    let cfg = TrainConfig { checkpoint_every: 6, ..tiny() };

    let mut full = Trainer::new(cfg.clone(), &ds, Some(t.clone())).unwrap();
    let a = run(&mut full, &dir.path().join("a"), |_| {}).unwrap();
    assert_eq!(a.steps, 8);
    let mid = dir.path().join("a/ckpt_000006.tpck");
    assert!(mid.exists());

    let ck = Checkpoint::load(&mid).unwrap();
    assert_eq!(ck.step, 6);
    let mut resumed = Trainer::resume(cfg.clone(), &ds, Some(t), &ck).unwrap();
    let b = run(&mut resumed, &dir.path().join("b"), |_| {}).unwrap();
    assert_eq!(b.logs.len(), 2);
    assert_eq!(fs::read(a.final_checkpoint).unwrap(), fs::read(b.final_checkpoint).unwrap());
    assert_eq!(a.logs[6..], b.logs[..]);
}

#[test]
fn resume_rejects_changed_structure() {
    let ds = data(8);
    let cfg = TrainConfig { from_scratch: true, ..tiny() };
    let ck = Trainer::new(cfg.clone(), &ds, None).unwrap().checkpoint();
    let other = TrainConfig { lr: 0.5, ..cfg.clone() };
    assert!(matches!(Trainer::resume(other, &ds, None, &ck), Err(Error::Config(m)) if m.contains("lr")));
    let longer = TrainConfig { epochs: 5, ..cfg };
    Trainer::resume(longer, &ds, None, &ck).unwrap();
}

#[test]
fn run_writes_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(8);
    let cfg = TrainConfig { max_steps: 3, from_scratch: true, ..tiny() };
    let mut tr = Trainer::new(cfg.clone(), &ds, None).unwrap();
    run(&mut tr, dir.path(), |_| {}).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,0,"));
    let echoed = TrainConfig::load(&dir.path().join("config.cfg")).unwrap();
    assert_eq!(echoed, cfg);
    let ck = Checkpoint::load(&dir.path().join("final.tpck")).unwrap();
    assert_eq!(ck.step, 3);
    assert!(ck.get("adam.m/enc/cls").is_some());
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = data(8);
    for it in ds.items.iter_mut() {
        it.image.data_mut()[0] = f32::NAN;
    }
    let cfg = TrainConfig { from_scratch: true, augment: false, ..tiny() };
    let mut tr = Trainer::new(cfg, &ds, None).unwrap();
    let before = tr.checkpoint().encode();
    let err = run(&mut tr, dir.path(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert_eq!(fs::read(dir.path().join("last_good.tpck")).unwrap(), before);
}

#[test]
fn overfits_a_single_scene() {
    let mut ds = data(8);
    ds.items.truncate(1);
    ds.info.items = 1;
    ds.info.val_items = 0;
    let cfg = TrainConfig { batch: 1, epochs: 500, from_scratch: true, augment: false, ..tiny() };
    let mut tr = Trainer::new(cfg, &ds, None).unwrap();
    let first = tr.train_step().unwrap().report;
    let mut last = first.clone();
    while !tr.is_done() {
        last = tr.train_step().unwrap().report;
    }
    assert!(last.rgb < 0.1 * first.rgb, "rgb {} -> {}", first.rgb, last.rgb);
    assert!(last.depth < 0.1 * first.depth, "depth {} -> {}", first.depth, last.depth);
}

#[test]
fn stronger_distillation_means_less_drift() {
    let ds = data(8);
    let t = teacher(&tiny(), 4);
    let drift = |lambda: f64| {
        let mut cfg = TrainConfig { max_steps: 40, epochs: 10, ..tiny() };
        cfg.weights.dist = lambda;
        let mut tr = Trainer::new(cfg, &ds, Some(t.clone())).unwrap();
        while !tr.is_done() {
            tr.train_step().unwrap();
        }
        mean_drift(&tr.student_encoder().unwrap(), &t, ds.train())
    };
    let (d100, d1, d0) = (drift(100.0), drift(1.0), drift(0.0));
    assert!(d100 < d1 && d1 < d0, "{d100} {d1} {d0}");
}

#[test]
fn trained_model_reproduces_training_forward() {
    let ds = data(8);
    let cfg = TrainConfig { max_steps: 2, from_scratch: true, ..tiny() };
    let mut tr = Trainer::new(cfg, &ds, None).unwrap();
    tr.train_step().unwrap();
    let m = TrainedModel::from_checkpoint(&tr.checkpoint()).unwrap();
    assert_eq!(m.store, *tr.store());
    let (img, depth) = m.reconstruct(&ds.items[0].image, None).unwrap();
    assert_eq!(img.shape(), &[8, 8, 3]);
    assert_eq!(depth.shape(), &[8, 8]);
    assert_eq!(m.reconstruct(&ds.items[0].image, None).unwrap().1, depth);
}
