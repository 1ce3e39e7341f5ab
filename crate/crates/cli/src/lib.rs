//! `shapeprior` command-line driver.

mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use shapeprior_core::evalkit::{
    self, feature_drift, linear_probe, pretrain_teacher, robustness_eval, shape_bias, AblationConfig, Perturbation,
    PretrainConfig, ProbeConfig,
};
use shapeprior_core::formats;
use shapeprior_core::gradsuite;
use shapeprior_core::renderer::Camera;
use shapeprior_core::scenegen::{self, Dataset, SHAPE_CLASSES};
use shapeprior_core::trainer::{self, Checkpoint, FrozenEncoder, TrainConfig, TrainedModel};

/// A bad invocation caught by the CLI itself rather than the core library.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Marks a run that completed but whose checks failed.
#[derive(Debug)]
struct ChecksFailed(String);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ChecksFailed {}

#[derive(Parser, Debug)]
#[command(
    name = "shapeprior",
    version,
    about = "Shape-aware encoder fine-tuning through differentiable triplane reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (images, depth maps, manifest).
    GenData(GenDataArgs),
    /// Pretrain the frozen teacher encoder on shape classification.
    PretrainTeacher(PretrainArgs),
    /// Fine-tune an encoder through the reconstruction bottleneck.
    Train(TrainArgs),
    /// Probe, shape-bias, robustness and drift evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Run the ablation grid over variants and seeds.
    Ablate(AblateArgs),
    /// Reconstruct image and depth of one input with a trained checkpoint.
    Render(RenderArgs),
    /// Finite-difference check of every analytic gradient in 64-bit mode.
    GradCheck,
    /// Plot metrics and ablation CSVs and write a markdown summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    /// Seed of every random choice in the dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Fraction of items held out as the validation split.
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    /// Probability that an item's texture class equals its shape class.
    #[arg(long, default_value_t = 0.8)]
    texture_correlation: f64,
    /// Also write this many cue-conflict scenes under `<out>/cueconflict`.
    #[arg(long, default_value_t = 0)]
    cue_conflict: usize,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then `--set` overrides in order.
    fn load(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root; defaults to the config's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for `teacher.tpck`, `pretrain.cfg` and `losses.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Training epochs over the training split.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Items per optimizer step.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed for initialization, shuffling and augmentation; defaults to the
    /// config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable crop/flip augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed of the run (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root (overrides `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint (overrides `teacher`).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the config echo.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-step progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Student or teacher checkpoint whose encoder is evaluated.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset with a held-out split.
    #[arg(long)]
    data: PathBuf,
    /// Cue-conflict set; defaults to `<data>/cueconflict` when present.
    #[arg(long)]
    cue_conflict: Option<PathBuf>,
    /// Teacher checkpoint for feature drift.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Seed of the probe and of the perturbations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe optimizer iterations.
    #[arg(long, default_value_t = 500)]
    probe_iterations: usize,
    /// Directory for `eval.csv` and `eval.cfg`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root (overrides `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint (overrides `teacher`).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Cue-conflict set; defaults to `<data>/cueconflict`.
    #[arg(long)]
    cue_conflict: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Step budget of every variant (overrides `max_steps`).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Comma-separated data fractions run besides the full data.
    #[arg(long, value_delimiter = ',', default_value = "0.0625,0.25")]
    fractions: Vec<f64>,
    /// Probe optimizer iterations.
    #[arg(long, default_value_t = 500)]
    probe_iterations: usize,
    /// Output directory for the table, summary and per-run directories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Trained student checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding the item to render.
    #[arg(long, requires = "item", conflicts_with = "image")]
    data: Option<PathBuf>,
    /// Item index within `--data`.
    #[arg(long, requires = "data")]
    item: Option<usize>,
    /// A PNG input instead of a dataset item.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output directory for the PNGs, depth map and config echo.
    #[arg(long)]
    out: PathBuf,
    /// Jitter ray samples with this seed; bin midpoints when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run or ablation directories holding `metrics.csv` or `ablation.csv`.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    /// Output directory for plots and `summary.md`.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on user error, 2 on internal error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.is::<UsageError>() {
        return 1;
    }
    if let Some(core) = e.downcast_ref::<shapeprior_core::Error>() {
        return if core.is_user_error() { 1 } else { 2 };
    }
    2
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::PretrainTeacher(a) => pretrain(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Render(a) => render(&a),
        Command::GradCheck => grad_check(),
        Command::Report(a) => report::report(&a.input, &a.out),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(usage(format!("--val-fraction must be in [0, 1), got {}", a.val_fraction)));
    }
    if !(0.0..=1.0).contains(&a.texture_correlation) {
        return Err(usage(format!("--texture-correlation must be in [0, 1], got {}", a.texture_correlation)));
    }
    let info = scenegen::make_dataset(&a.out, a.n, a.seed, a.res, a.val_fraction, a.texture_correlation)?;
    println!(
        "wrote {} scenes ({} train, {} val) to {}",
        info.items,
        info.train_items(),
        info.val_items,
        a.out.display()
    );
    if a.cue_conflict > 0 {
        // Distinct stream from the ordinary items of the same seed.
        let seed = a.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let dir = scenegen::make_cue_conflict(&a.out, a.cue_conflict, seed, a.res)?;
        println!("wrote {} cue-conflict scenes to {}", a.cue_conflict, dir.display());
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let pcfg = PretrainConfig {
        encoder: cfg.encoder.clone(),
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed,
        augment: !a.no_augment,
    };
    let dataset = Dataset::load(&cfg.data)?;
    let mut echo = String::new();
    let _ = writeln!(echo, "data = {}", cfg.data.display());
    for key in ["image_size", "patch_size", "enc_depth", "enc_width", "enc_heads"] {
        let _ = writeln!(echo, "{key} = {}", cfg.get(key).expect("known key"));
    }
    let _ = write!(
        echo,
        "epochs = {}\nbatch = {}\nlr = {}\nseed = {}\naugment = {}\n",
        pcfg.epochs, pcfg.batch, pcfg.lr, pcfg.seed, pcfg.augment
    );
    write(&a.out.join("pretrain.cfg"), &echo)?;

    let mut losses = String::from("epoch,loss\n");
    let teacher = pretrain_teacher(dataset.train(), &pcfg, |epoch, loss| {
        eprintln!("epoch {epoch}: loss {loss:.4}");
        let _ = writeln!(losses, "{epoch},{loss}");
    })?;
    write(&a.out.join("losses.csv"), &losses)?;
    let path = a.out.join("teacher.tpck");
    teacher.to_checkpoint(pcfg.epochs as u64).save(&path)?;
    println!("wrote {}", path.display());
    if !dataset.val().is_empty() {
        let probe = ProbeConfig { seed, ..Default::default() };
        let (_, r) = linear_probe(&teacher, dataset.train(), dataset.val(), &probe)?;
        let line = format!(
            "teacher probe accuracy {:.4} on {} held-out items (chance {:.4})",
            r.accuracy,
            r.val_size,
            1.0 / SHAPE_CLASSES as f64
        );
        println!("{line}");
        write(&a.out.join("probe.txt"), &(line + "\n"))?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    if let Some(t) = &a.teacher {
        cfg.teacher = t.clone();
    }
    let quiet = a.quiet;
    let clock = Instant::now();
    let outcome = trainer::train(&cfg, &a.out, a.resume.as_deref(), |log| {
        if !quiet {
            let r = &log.report;
            eprintln!(
                "step {:>6} epoch {:>3}  rgb {:.5}  depth {:.5}  dist {:.5}  norm {:.5}  total {:.5}",
                log.step, log.epoch, r.rgb, r.depth, r.dist, r.norm, r.total
            );
        }
    })?;
    println!(
        "trained to step {} in {:.1}s; final checkpoint {}",
        outcome.steps,
        clock.elapsed().as_secs_f64(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cue_dir(explicit: &Option<PathBuf>, data: &Path) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(p.clone()),
        None => Some(data.join("cueconflict")).filter(|p| p.join("manifest.tsv").exists()),
    }
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let encoder = FrozenEncoder::load(&a.checkpoint)?;
    let dataset = Dataset::load(&a.data)?;
    if dataset.val().is_empty() {
        return Err(usage(format!("{} has no held-out split to probe on", a.data.display())));
    }
    let camera = Camera::default();
    let probe_cfg = ProbeConfig { iterations: a.probe_iterations, seed: a.seed, ..Default::default() };
    let (probe, result) = linear_probe(&encoder, dataset.train(), dataset.val(), &probe_cfg)?;
    let mut rows: Vec<(String, String)> = vec![("probe_acc".into(), result.accuracy.to_string())];
    if let Some(dir) = cue_dir(&a.cue_conflict, &a.data) {
        let cue = Dataset::load(&dir)?;
        let bias = shape_bias(&encoder, &probe, &cue.items)?;
        println!("shape bias: {bias}");
        let v = bias.bias.map_or_else(|| "undefined".to_string(), |b| b.to_string());
        rows.push(("shape_bias".into(), v));
    }
    for p in Perturbation::SHIFTS {
        let acc = robustness_eval(&encoder, &probe, dataset.val(), p, a.seed, &camera)?;
        rows.push((format!("robust_{}", p.name()), acc.to_string()));
    }
    if let Some(t) = &a.teacher {
        let teacher = FrozenEncoder::load(t)?;
        rows.push(("feature_drift".into(), feature_drift(&encoder, &teacher, dataset.val())?.to_string()));
    }
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        println!("{k:<24} {v}");
        let _ = writeln!(csv, "{k},{v}");
    }
    if let Some(out) = &a.out {
        write(&out.join("eval.csv"), &csv)?;
        let mut echo = String::new();
        let _ = writeln!(echo, "checkpoint = {}", a.checkpoint.display());
        let _ = writeln!(echo, "data = {}", a.data.display());
        if let Some(c) = cue_dir(&a.cue_conflict, &a.data) {
            let _ = writeln!(echo, "cue_conflict = {}", c.display());
        }
        if let Some(t) = &a.teacher {
            let _ = writeln!(echo, "teacher = {}", t.display());
        }
        let _ = writeln!(echo, "seed = {}\nprobe_iterations = {}", a.seed, a.probe_iterations);
        write(&out.join("eval.cfg"), &echo)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let mut base = a.config.load()?;
    if let Some(d) = &a.data {
        base.data = d.clone();
    }
    if let Some(t) = &a.teacher {
        base.teacher = t.clone();
    }
    if let Some(m) = a.max_steps {
        base.max_steps = m;
    }
    if a.seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    if base.teacher.as_os_str().is_empty() {
        return Err(usage("ablate needs a teacher checkpoint (--teacher or `teacher` key)"));
    }
    let dataset = Dataset::load(&base.data)?;
    let cue_path = cue_dir(&a.cue_conflict, &base.data).ok_or_else(|| {
        usage(format!("no cue-conflict set: pass --cue-conflict or create {}/cueconflict", base.data.display()))
    })?;
    let cue = Dataset::load(&cue_path)?;
    let teacher = FrozenEncoder::load(&base.teacher)?;
    let cfg = AblationConfig {
        base,
        seeds: a.seeds.clone(),
        fractions: a.fractions.clone(),
        probe: ProbeConfig { iterations: a.probe_iterations, ..Default::default() },
    };
    let mut echo = cfg.base.to_text();
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let fractions: Vec<String> = cfg.fractions.iter().map(f64::to_string).collect();
    let _ = write!(
        echo,
        "# ablation\n# seeds = {}\n# fractions = {}\n# cue_conflict = {}\n# probe_iterations = {}\n",
        seeds.join(","),
        fractions.join(","),
        cue_path.display(),
        a.probe_iterations
    );
    write(&a.out.join("config.cfg"), &echo)?;
    let table = evalkit::ablate(&cfg, &dataset, &cue, &teacher, Some(&a.out), |s| eprintln!("{s}"))?;
    print!("{}", table.summary());
    if !table.failures.is_empty() {
        bail!(ChecksFailed(format!("{} ablation run(s) failed", table.failures.len())));
    }
    Ok(())
}

fn render(a: &RenderArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = TrainedModel::from_checkpoint(&ck)?;
    let (input, target) = match (&a.data, a.item, &a.image) {
        (Some(d), Some(i), None) => {
            let ds = Dataset::load(d)?;
            let item = ds
                .items
                .iter()
                .find(|it| it.spec.idx == i)
                .ok_or_else(|| usage(format!("{} has no item {i}", d.display())))?;
            (item.image.clone(), Some(item.depth.clone()))
        }
        (None, None, Some(p)) => (formats::read_png_rgb(p)?, None),
        _ => return Err(usage("render needs either --data with --item, or --image")),
    };
    let (image, depth) = model.reconstruct(&input, a.seed)?;
    let cam = model.config.camera();
    let (near, far) = (cam.near as f32, cam.far as f32);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    formats::write_png_rgb(&a.out.join("input.png"), &input)?;
    formats::write_png_rgb(&a.out.join("rgb.png"), &image)?;
    formats::write_png_gray(&a.out.join("depth.png"), &depth, near, far)?;
    formats::write_tpdm(&a.out.join("depth.tpdm"), &depth)?;
    if let Some(t) = target {
        formats::write_png_gray(&a.out.join("target_depth.png"), &t, near, far)?;
    }
    let mut echo = format!("checkpoint = {}\n", a.checkpoint.display());
    match (&a.data, a.item, &a.image) {
        (Some(d), Some(i), _) => {
            let _ = write!(echo, "data = {}\nitem = {i}\n", d.display());
        }
        (_, _, Some(p)) => {
            let _ = writeln!(echo, "image = {}", p.display());
        }
        _ => {}
    }
    if let Some(s) = a.seed {
        let _ = writeln!(echo, "seed = {s}");
    }
    write(&a.out.join("render.cfg"), &echo)?;
    println!("wrote reconstruction to {}", a.out.display());
    Ok(())
}

fn grad_check() -> anyhow::Result<()> {
    let clock = Instant::now();
    let checks = gradsuite::run_suite()?;
    println!("{:<28} {:>12} {:>10}  status", "component", "rel. error", "threshold");
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>12.3e} {:>10.0e}  {status}", c.component, c.error, c.threshold);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), clock.elapsed().as_secs_f64());
    if failed > 0 {
        bail!(ChecksFailed(format!("{failed} gradient check(s) above threshold")));
    }
    Ok(())
}
