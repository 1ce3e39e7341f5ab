use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use shapeprior_cli::run;

const TINY: &str = "\
batch = 2
lr = 0.001
epochs = 1
max_steps = 3
coarse_samples = 2
fine_samples = 2
render_res = 8
image_size = 16
patch_size = 8
enc_depth = 4
enc_width = 8
enc_heads = 2
plane_low_res = 2
plane_res = 8
plane_channels = 4
emb_dim = 8
attn_heads = 2
mlp_hidden = 8
";

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("shapeprior").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn same(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Tiny dataset, teacher and config under `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    assert_eq!(
        cli(&["gen-data", "--n", "24", "--seed", "3", "--res", "16", "--out", s(&data), "--cue-conflict", "8"]),
        0
    );
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let tdir = dir.join("teacher");
    assert_eq!(
        cli(&[
            "pretrain-teacher",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&tdir),
            "--epochs",
            "1",
            "--batch",
            "8"
        ]),
        0
    );
    (data, cfg, tdir.join("teacher.tpck"))
}

#[test]
fn help_exits_zero_and_documents_flags() {
    assert_eq!(cli(&["--help"]), 0);
    for sub in ["gen-data", "pretrain-teacher", "train", "eval", "ablate", "render", "grad-check", "report"] {
        assert_eq!(cli(&[sub, "--help"]), 0, "{sub}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_shapeprior")).args(["train", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--config", "--set", "--seed", "--data", "--teacher", "--out", "--resume"] {
        assert!(text.contains(flag), "train --help lacks {flag}");
    }
    // Every flag line carries a description.
    for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
        assert!(line.trim().split("  ").filter(|p| !p.is_empty()).count() >= 2, "undocumented: {line}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["gen-data", "--n", "8", "--out", "x", "--bogus"]), 1);
    assert_eq!(cli(&["gen-data", "--out", "x"]), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_shapeprior")).args(["train", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_name_the_key_or_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = Command::new(env!("CARGO_BIN_EXE_shapeprior"))
        .args(["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "batch = 2\nlearning_rate = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shapeprior"))
        .args(["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(cli(&["train", "--set", "batch", "--out", s(&dir.path().join("o"))]), 1);
    assert_eq!(cli(&["train", "--set", "batch=two", "--out", s(&dir.path().join("o"))]), 1);
    // A missing dataset is a user error too.
    assert_eq!(
        cli(&[
            "train",
            "--set",
            "from_scratch=true",
            "--data",
            s(&dir.path().join("none")),
            "--out",
            s(&dir.path().join("o"))
        ]),
        1
    );
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(
            cli(&["gen-data", "--n", "16", "--seed", "9", "--res", "16", "--out", s(d), "--cue-conflict", "4"]),
            0
        );
    }
    assert_eq!(cli(&["gen-data", "--n", "16", "--seed", "10", "--res", "16", "--out", s(&c)]), 0);
    let fa = files(&a);
    // manifest, dataset.cfg and a png plus depth map per item, for both sets.
    assert_eq!(fa.len(), 2 + 2 * 16 + 2 + 2 * 4);
    assert!(fa == files(&b));
    assert_ne!(fs::read(a.join("manifest.tsv")).unwrap(), fs::read(c.join("manifest.tsv")).unwrap());
    assert_ne!(fs::read(a.join("train/0.png")).unwrap(), fs::read(c.join("train/0.png")).unwrap());
    // Rerunning into the same directory overwrites identically.
    assert_eq!(cli(&["gen-data", "--n", "16", "--seed", "9", "--res", "16", "--out", s(&a), "--cue-conflict", "4"]), 0);
    assert!(fa == files(&a));
    assert_eq!(cli(&["gen-data", "--n", "4", "--out", s(&c)]), 1);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, teacher) = fixture(dir.path());
    assert!(teacher.exists());
    let tdir = teacher.parent().unwrap();
    assert!(fs::read_to_string(tdir.join("pretrain.cfg")).unwrap().contains("enc_width = 8"));
    assert_eq!(fs::read_to_string(tdir.join("losses.csv")).unwrap().lines().count(), 2);

    let run_dir = dir.path().join("run");
    let args = ["train", "--config", s(&cfg), "--data", s(&data), "--teacher", s(&teacher), "--set", "seed=4", "-q"];
    assert_eq!(cli(&[&args[..], &["--out", s(&run_dir)]].concat()), 0);
    let echo = fs::read_to_string(run_dir.join("config.cfg")).unwrap();
    assert!(echo.contains("seed = 4") && echo.contains("max_steps = 3"));
    assert_eq!(fs::read_to_string(run_dir.join("metrics.csv")).unwrap().lines().count(), 4);
    let ck = run_dir.join("final.tpck");

    let again = dir.path().join("again");
    assert_eq!(cli(&[&args[..], &["--out", s(&again)]].concat()), 0);
    assert!(same(&ck, &again.join("final.tpck")));

    let eval_dir = dir.path().join("eval");
    assert_eq!(
        cli(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&data),
            "--teacher",
            s(&teacher),
            "--out",
            s(&eval_dir),
            "--probe-iterations",
            "50"
        ]),
        0
    );
    let table = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    for m in
        ["probe_acc", "shape_bias", "robust_texture_swap", "robust_grayscale", "robust_color_noise", "feature_drift"]
    {
        assert!(table.contains(m), "eval.csv lacks {m}");
    }
    assert!(eval_dir.join("eval.cfg").exists());
    // The teacher checkpoint evaluates too.
    assert_eq!(cli(&["eval", "--checkpoint", s(&teacher), "--data", s(&data), "--probe-iterations", "20"]), 0);

    let render_dir = dir.path().join("render");
    assert_eq!(cli(&["render", "--checkpoint", s(&ck), "--data", s(&data), "--item", "2", "--out", s(&render_dir)]), 0);
    for f in ["input.png", "rgb.png", "depth.png", "depth.tpdm", "target_depth.png", "render.cfg"] {
        assert!(render_dir.join(f).exists(), "missing {f}");
    }
    let from_png = dir.path().join("render_png");
    assert_eq!(
        cli(&[
            "render",
            "--checkpoint",
            s(&ck),
            "--image",
            s(&data.join("train/0.png")),
            "--out",
            s(&from_png),
            "--seed",
            "1"
        ]),
        0
    );
    assert_eq!(cli(&["render", "--checkpoint", s(&ck), "--out", s(&from_png)]), 1);
    assert_eq!(cli(&["render", "--checkpoint", s(&ck), "--data", s(&data), "--item", "999", "--out", s(&from_png)]), 1);

    let report_dir = dir.path().join("report");
    assert_eq!(cli(&["report", "--input", s(&run_dir), "--out", s(&report_dir)]), 0);
    assert!(report_dir.join("run_losses.png").exists());
    let md = fs::read_to_string(report_dir.join("summary.md")).unwrap();
    assert!(md.contains("run_losses.png") && md.contains("| rgb |"));
    assert_eq!(cli(&["report", "--input", s(&eval_dir), "--out", s(&report_dir)]), 1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, teacher) = fixture(dir.path());
    let base = [
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "-q",
        "--set",
        "max_steps=6",
        "--set",
        "checkpoint_every=4",
    ];
    let full = dir.path().join("full");
    assert_eq!(cli(&[&base[..], &["--out", s(&full)]].concat()), 0);
    assert!(full.join("ckpt_000004.tpck").exists());
    let resumed = dir.path().join("resumed");
    let ck = full.join("ckpt_000004.tpck");
    assert_eq!(cli(&[&base[..], &["--resume", s(&ck), "--out", s(&resumed)]].concat()), 0);
    assert!(same(&full.join("final.tpck"), &resumed.join("final.tpck")));
    // Structural changes are refused.
    assert_eq!(cli(&[&base[..], &["--set", "mlp_hidden=4", "--resume", s(&ck), "--out", s(&resumed)]].concat()), 1);
}

#[test]
fn ablate_writes_table_and_report_plots_it() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, teacher) = fixture(dir.path());
    let out = dir.path().join("abl");
    let code = cli(&[
        "ablate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--seeds",
        "1",
        "--max-steps",
        "1",
        "--fractions",
        "0.5",
        "--probe-iterations",
        "20",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 6);
    assert!(csv.contains("data_1_2"));
    assert!(out.join("config.cfg").exists() && out.join("summary.txt").exists());
    let rep = dir.path().join("rep");
    assert_eq!(cli(&["report", "--input", s(&out), "--out", s(&rep)]), 0);
    assert!(rep.join("abl_ablation.png").exists());
    assert!(fs::read_to_string(rep.join("summary.md")).unwrap().contains("| no_dist |"));
    // Without a teacher the grid cannot run.
    assert_eq!(cli(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]), 1);
}

#[test]
fn grad_check_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_shapeprior")).arg("grad-check").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("0 failed"));
    assert!(text.contains("render_4x4_to_loss") && text.contains("radiance_mlp"));
}
