use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{feature_drift, linear_probe, robustness_eval, shape_bias, Perturbation, ProbeConfig};
use crate::error::{Error, Result};
use crate::scenegen::Dataset;
use crate::trainer::{self, FrozenEncoder, TrainConfig, Trainer};

/// Metric names in table order.
pub const METRICS: [&str; 6] =
    ["probe_acc", "shape_bias", "robust_texture_swap", "robust_grayscale", "robust_color_noise", "feature_drift"];

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Shared settings; `max_steps` must be set and is the step budget of
    /// every trained variant.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Data fractions run in addition to the full data.
    pub fractions: Vec<f64>,
    pub probe: ProbeConfig,
}

impl AblationConfig {
    pub fn new(base: TrainConfig) -> Self {
        Self { base, seeds: vec![0, 1, 2], fractions: vec![1.0 / 16.0, 0.25], probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// `(variant, seed, message)` of runs that failed.
    pub failures: Vec<(String, u64, String)>,
}

impl AblationTable {
    /// Mean over seeds, ignoring non-finite entries.
    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.metric == metric && r.value.is_finite())
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,seed,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.variant, r.metric, r.seed, r.value);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::config(format!("ablation csv line {}: `{line}`", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(AblationRow {
                variant: f[0].to_string(),
                metric: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad())?,
                value: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows, failures: Vec::new() })
    }

    /// Fixed-width table of seed means, one row per variant.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<14}", "variant");
        for m in METRICS {
            let _ = write!(s, " {m:>20}");
        }
        s.push('\n');
        for v in self.variants() {
            let _ = write!(s, "{v:<14}");
            for m in METRICS {
                match self.mean(&v, m) {
                    Some(x) => {
                        let _ = write!(s, " {x:>20.4}");
                    }
                    None => {
                        let _ = write!(s, " {:>20}", "n/a");
                    }
                }
            }
            s.push('\n');
        }
        s.push_str("\nvalues are means over seeds; data_1 is the full variant\n");
        for (v, seed, msg) in &self.failures {
            let _ = writeln!(s, "FAILED {v} seed {seed}: {msg}");
        }
        s
    }

    /// Writes `ablation.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("summary.txt");
        fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))
    }
}

fn fraction_name(f: f64) -> String {
    let inv = 1.0 / f;
    if (inv - inv.round()).abs() < 1e-9 {
        format!("data_1_{}", inv.round() as u64)
    } else {
        format!("data_{f}")
    }
}

/// Named training configs of the grid for one seed.
pub fn ablation_variants(base: &TrainConfig, fractions: &[f64], seed: u64) -> Vec<(String, TrainConfig)> {
    let cfg = TrainConfig {
        seed,
        no_triplane: false,
        no_dist: false,
        from_scratch: false,
        data_fraction: 1.0,
        // The step cap, not the epoch count, bounds every run.
        epochs: 1_000_000,
        ..base.clone()
    };
    let mut out = vec![
        ("full".to_string(), cfg.clone()),
        ("no_triplane".to_string(), TrainConfig { no_triplane: true, ..cfg.clone() }),
        ("no_dist".to_string(), TrainConfig { no_dist: true, ..cfg.clone() }),
        ("from_scratch".to_string(), TrainConfig { from_scratch: true, ..cfg.clone() }),
    ];
    for &f in fractions {
        out.push((fraction_name(f), TrainConfig { data_fraction: f, ..cfg.clone() }));
    }
    out
}

fn evaluate(
    encoder: &FrozenEncoder,
    teacher: &FrozenEncoder,
    dataset: &Dataset,
    cue_conflict: &Dataset,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let camera = crate::renderer::Camera::default();
    let (probe, result) = linear_probe(encoder, dataset.train(), dataset.val(), probe_cfg)?;
    let bias = shape_bias(encoder, &probe, &cue_conflict.items)?;
    let mut out = vec![("probe_acc", result.accuracy), ("shape_bias", bias.bias.unwrap_or(f64::NAN))];
    for (name, p) in METRICS[2..5].iter().zip(Perturbation::SHIFTS) {
        out.push((name, robustness_eval(encoder, &probe, dataset.val(), p, seed, &camera)?));
    }
    out.push(("feature_drift", feature_drift(encoder, teacher, dataset.val())?));
    Ok(out)
}

/// Runs every variant for every seed and evaluates the resulting encoders,
/// plus the untouched teacher as the `teacher` baseline. A failing run is
/// recorded and the grid continues. With `out`, each run's checkpoint and
/// metrics go to `out/runs/<variant>_seed<k>/`.
pub fn ablate(
    cfg: &AblationConfig,
    dataset: &Dataset,
    cue_conflict: &Dataset,
    teacher: &FrozenEncoder,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    if cfg.base.max_steps == 0 {
        return Err(Error::config("ablation needs max_steps > 0 as the shared step budget"));
    }
    if dataset.val().is_empty() {
        return Err(Error::config("ablation needs a held-out split (val_items > 0)"));
    }
    let mut table = AblationTable::default();
    let push = |table: &mut AblationTable, variant: &str, seed: u64, metrics: Vec<(&str, f64)>| {
        for (m, v) in metrics {
            table.rows.push(AblationRow { variant: variant.to_string(), metric: m.to_string(), seed, value: v });
        }
    };
    for &seed in &cfg.seeds {
        let probe_cfg = ProbeConfig { seed, ..cfg.probe.clone() };
        progress(&format!("seed {seed}: teacher"));
        match evaluate(teacher, teacher, dataset, cue_conflict, &probe_cfg, seed) {
            Ok(m) => push(&mut table, "teacher", seed, m),
            Err(e) => table.failures.push(("teacher".into(), seed, e.to_string())),
        }
        for (name, vcfg) in ablation_variants(&cfg.base, &cfg.fractions, seed) {
            progress(&format!("seed {seed}: {name}"));
            let result = (|| -> Result<Vec<(&'static str, f64)>> {
                let mut tr = Trainer::new(vcfg, dataset, Some(teacher.clone()))?;
                match out {
                    Some(dir) => {
                        trainer::run(&mut tr, &dir.join("runs").join(format!("{name}_seed{seed}")), |_| {})?;
                    }
                    None => {
                        while !tr.is_done() {
                            tr.train_step()?;
                        }
                    }
                }
                evaluate(&tr.student_encoder()?, teacher, dataset, cue_conflict, &probe_cfg, seed)
            })();
            match result {
                Ok(m) => push(&mut table, &name, seed, m),
                Err(e) => table.failures.push((name, seed, e.to_string())),
            }
        }
    }
    if let Some(dir) = out {
        table.write(dir)?;
    }
    Ok(table)
}
