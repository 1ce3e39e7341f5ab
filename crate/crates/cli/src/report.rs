//! `report`: line plots of training metrics, bar plots of ablation tables,
//! and a markdown summary. Plots carry no text; `summary.md` names panels
//! and colors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use plotters::prelude::*;

use shapeprior_core::evalkit::{AblationTable, METRICS};

const COLORS: [(&str, RGBColor); 8] = [
    ("blue", RGBColor(31, 119, 180)),
    ("orange", RGBColor(255, 127, 14)),
    ("green", RGBColor(44, 160, 44)),
    ("red", RGBColor(214, 39, 40)),
    ("purple", RGBColor(148, 103, 189)),
    ("brown", RGBColor(140, 86, 75)),
    ("pink", RGBColor(227, 119, 194)),
    ("gray", RGBColor(127, 127, 127)),
];

const LOSS_COLUMNS: [&str; 5] = ["rgb", "depth", "dist", "norm", "total"];

fn color(i: usize) -> (&'static str, RGBColor) {
    COLORS[i % COLORS.len()]
}

/// Per-step loss columns of one `metrics.csv`.
#[derive(Debug, Default)]
pub(crate) struct Metrics {
    pub steps: Vec<f64>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

pub(crate) fn read_metrics(path: &Path) -> anyhow::Result<Metrics> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let step = col("step")?;
    let idx: Vec<(&str, usize)> = LOSS_COLUMNS.iter().map(|&c| Ok((c, col(c)?))).collect::<anyhow::Result<_>>()?;
    let mut m = Metrics::default();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), line + 2))?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec.get(i).unwrap_or("").parse().with_context(|| format!("{} row {}: bad number", path.display(), line + 2))
        };
        m.steps.push(num(step)?);
        for &(name, i) in &idx {
            m.columns.entry(name.to_string()).or_default().push(num(i)?);
        }
    }
    Ok(m)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// One panel per loss column, left to right then top to bottom.
fn plot_metrics(m: &Metrics, path: &Path) -> anyhow::Result<()> {
    let root = BitMapBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((2, 3));
    let (x0, x1) = range(m.steps.iter().copied());
    for (panel, name) in panels.iter().zip(LOSS_COLUMNS) {
        let ys = &m.columns[name];
        let (y0, y1) = range(ys.iter().copied());
        let mut chart = ChartBuilder::on(panel).margin(12).build_cartesian_2d(x0..x1, y0..y1)?;
        chart.plotting_area().fill(&RGBColor(248, 248, 248))?;
        chart.draw_series(LineSeries::new(
            m.steps.iter().zip(ys).filter(|(_, y)| y.is_finite()).map(|(&x, &y)| (x, y)),
            color(0).1.stroke_width(2),
        ))?;
    }
    root.present()?;
    Ok(())
}

/// One panel per metric; bars are variants in table order.
fn plot_ablation(t: &AblationTable, path: &Path) -> anyhow::Result<()> {
    let root = BitMapBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE)?;
    let variants = t.variants();
    for (panel, metric) in root.split_evenly((2, 3)).iter().zip(METRICS) {
        let means: Vec<Option<f64>> = variants.iter().map(|v| t.mean(v, metric)).collect();
        let hi = means.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let y1 = if hi > 0.0 { hi * 1.1 } else { 1.0 };
        let mut chart =
            ChartBuilder::on(panel).margin(12).build_cartesian_2d(0.0..variants.len().max(1) as f64, 0.0..y1)?;
        chart.plotting_area().fill(&RGBColor(248, 248, 248))?;
        chart.draw_series(means.iter().enumerate().filter_map(|(i, m)| {
            m.map(|v| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v.max(0.0))], color(i).1.filled()))
        }))?;
    }
    root.present()?;
    Ok(())
}

fn label(dir: &Path, taken: &mut Vec<String>) -> String {
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty() && s != "." && s != "..")
        .unwrap_or_else(|| "run".to_string());
    let mut name = base.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}_{k}");
        k += 1;
    }
    taken.push(name.clone());
    name
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Reads each input directory and writes plots plus `summary.md` to `out`.
pub(crate) fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut md = String::from("# Report\n");
    let mut taken = Vec::new();
    let mut found = 0;
    for dir in inputs {
        if !dir.is_dir() {
            return Err(crate::usage(format!("{} is not a directory", dir.display())));
        }
        let name = label(dir, &mut taken);
        let _ = write!(md, "\n## {name}\n\nSource: `{}`\n", dir.display());
        let metrics = dir.join("metrics.csv");
        if metrics.exists() {
            found += 1;
            let m = read_metrics(&metrics)?;
            let png = format!("{name}_losses.png");
            plot_metrics(&m, &out.join(&png))?;
            let _ = write!(
                md,
                "\n![losses]({png})\n\nPanels (left to right, top to bottom): {}. x is the step.\n\n",
                LOSS_COLUMNS.join(", ")
            );
            let _ = writeln!(md, "| loss | first | last | change |\n|---|---|---|---|");
            for c in LOSS_COLUMNS {
                let ys = &m.columns[c];
                let (first, last) = (ys.first().copied(), ys.last().copied());
                let change = match (first, last) {
                    (Some(a), Some(b)) if a != 0.0 => format!("{:+.1}%", 100.0 * (b - a) / a.abs()),
                    _ => "n/a".to_string(),
                };
                let _ = writeln!(md, "| {c} | {} | {} | {change} |", fmt(first), fmt(last));
            }
            let _ = writeln!(md, "\n{} logged steps.", m.steps.len());
        }
        let ablation = dir.join("ablation.csv");
        if ablation.exists() {
            found += 1;
            let text = fs::read_to_string(&ablation).with_context(|| format!("reading {}", ablation.display()))?;
            let t = AblationTable::from_csv(&text)?;
            let png = format!("{name}_ablation.png");
            plot_ablation(&t, &out.join(&png))?;
            let variants = t.variants();
            let legend: Vec<String> =
                variants.iter().enumerate().map(|(i, v)| format!("{v} = {}", color(i).0)).collect();
            let _ = write!(
                md,
                "\n![ablation]({png})\n\nPanels (left to right, top to bottom): {}. Bars: {}.\n\nMeans over seeds:\n\n",
                METRICS.join(", "),
                legend.join(", ")
            );
            let _ = writeln!(md, "| variant | {} |", METRICS.join(" | "));
            let _ = writeln!(md, "|---|{}", "---|".repeat(METRICS.len()));
            for v in &variants {
                let cells: Vec<String> = METRICS.iter().map(|m| fmt(t.mean(v, m))).collect();
                let _ = writeln!(md, "| {v} | {} |", cells.join(" | "));
            }
        }
        if !metrics.exists() && !ablation.exists() {
            let _ = writeln!(md, "\nNo metrics.csv or ablation.csv found.");
        }
    }
    if found == 0 {
        return Err(crate::usage("no metrics.csv or ablation.csv in any input directory"));
    }
    let path = out.join("summary.md");
    fs::write(&path, md).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
