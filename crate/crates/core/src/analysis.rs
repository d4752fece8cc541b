//! Post-processing of training logs and sweep results: dev-accuracy
//! stability and hyperparameter-effect curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub label: String,
    pub runs: usize,
    /// Post-warm-up evaluations pooled over runs.
    pub evals: usize,
    pub mean: f64,
    /// Mean over runs of the per-run standard deviation.
    pub std: f64,
    pub per_run_std: Vec<f64>,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for `n = 1`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Dev-accuracy volatility after `warmup_steps`, per label. Each run needs at
/// least three post-warm-up evaluations.
pub fn stability_stats(logs: &[(String, TrainLog)], warmup_steps: usize) -> Result<Vec<StabilityRow>> {
    let mut grouped: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (label, log) in logs {
        let series: Vec<f64> = log
            .evals
            .iter()
            .filter(|e| e.step > warmup_steps)
            .map(|e| e.dev_accuracy)
            .collect();
        if series.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "{label}: {} evaluations after step {warmup_steps}, need at least 3",
                series.len()
            )));
        }
        grouped.entry(label).or_default().push(series);
    }
    Ok(grouped
        .into_iter()
        .map(|(label, runs)| {
            let per_run_std: Vec<f64> = runs.iter().map(|s| mean_std(s).1).collect();
            let pooled: Vec<f64> = runs.iter().flatten().copied().collect();
            StabilityRow {
                label: label.to_string(),
                runs: runs.len(),
                evals: pooled.len(),
                mean: mean_std(&pooled).0,
                std: mean_std(&per_run_std).0,
                per_run_std,
            }
        })
        .collect())
}

/// One finished (or failed) run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub test_set: String,
    pub seed: u64,
    /// `None` when the run is missing or failed.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub std: f64,
    pub seeds: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub param: String,
    pub test_set: String,
    /// Strictly increasing in `x`.
    pub points: Vec<CurvePoint>,
}

impl CurveSeries {
    pub fn label(&self) -> String {
        format!("{} / {}", self.param, self.test_set)
    }
}

/// Aggregates sweep points into one series per (hyperparameter, test set).
/// A point is flagged incomplete when any of `expected_seeds` is missing.
pub fn build_curves(points: &[SweepPoint], expected_seeds: &[u64]) -> Vec<CurveSeries> {
    let mut grouped: BTreeMap<(String, String), BTreeMap<u64, Vec<&SweepPoint>>> = BTreeMap::new();
    for p in points {
        grouped
            .entry((p.param.clone(), p.test_set.clone()))
            .or_default()
            .entry(p.value.to_bits())
            .or_default()
            .push(p);
    }
    grouped
        .into_iter()
        .map(|((param, test_set), by_value)| {
            let mut pts: Vec<CurvePoint> = by_value
                .into_iter()
                .map(|(bits, runs)| {
                    let ys: Vec<f64> = runs.iter().filter_map(|r| r.metric).collect();
                    let seeds: Vec<u64> = runs.iter().filter(|r| r.metric.is_some()).map(|r| r.seed).collect();
                    let (y, std) = if ys.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&ys) };
                    CurvePoint {
                        x: f64::from_bits(bits),
                        y,
                        std,
                        seeds: ys.len(),
                        incomplete: ys.is_empty() || expected_seeds.iter().any(|s| !seeds.contains(s)),
                    }
                })
                .collect();
            pts.sort_by(|a, b| a.x.total_cmp(&b.x));
            CurveSeries {
                param,
                test_set,
                points: pts,
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    param: String,
    test_set: String,
    x: f64,
    y: f64,
    std: f64,
    seeds: usize,
    incomplete: bool,
}

pub fn write_curves_csv(path: &Path, curves: &[CurveSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for c in curves {
        for p in &c.points {
            w.serialize(CsvRow {
                param: c.param.clone(),
                test_set: c.test_set.clone(),
                x: p.x,
                y: p.y,
                std: p.std,
                seeds: p.seeds,
                incomplete: p.incomplete,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveSeries>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<CurveSeries> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let point = CurvePoint {
            x: row.x,
            y: row.y,
            std: row.std,
            seeds: row.seeds,
            incomplete: row.incomplete,
        };
        match out.last_mut() {
            Some(c) if c.param == row.param && c.test_set == row.test_set => c.points.push(point),
            _ => out.push(CurveSeries {
                param: row.param,
                test_set: row.test_set,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A line chart of every series sharing one hyperparameter, with ±std bars.
pub fn render_svg(title: &str, curves: &[&CurveSeries]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let finite = |p: &&CurvePoint| p.y.is_finite();
    let xs: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.x)).collect();
    let ys: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().filter(finite).flat_map(|p| [p.y - p.std, p.y + p.std]))
        .collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = if ys.is_empty() { (0.0, 1.0) } else { span(&ys) };
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for x in [x0, x1] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, sx(x), h - m + 16.0);
    }
    for y in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, m - 4.0, sy(y));
    }
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .filter(finite)
            .map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in c.points.iter().filter(finite) {
            let dash = if p.incomplete { r#" stroke-dasharray="3,2""# } else { "" };
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"{dash}/>"#,
                sy(p.y - p.std),
                sy(p.y + p.std),
                x = sx(p.x)
            );
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(p.x), sy(p.y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m - 150.0, m + 14.0 * i as f64, c.test_set);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv` and, for each hyperparameter with at least two grid
/// points, `{param}.svg` into `dir`. Returns the written paths.
pub fn sweep_curves(points: &[SweepPoint], expected_seeds: &[u64], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let curves = build_curves(points, expected_seeds);
    let csv_path = dir.join("curves.csv");
    write_curves_csv(&csv_path, &curves)?;
    let mut written = vec![csv_path];
    let mut by_param: BTreeMap<&str, Vec<&CurveSeries>> = BTreeMap::new();
    for c in &curves {
        by_param.entry(&c.param).or_default().push(c);
    }
    for (param, series) in by_param {
        if series.iter().all(|c| c.points.len() < 2) {
            log::warn!("{param}: a single grid point, writing data only");
            continue;
        }
        let path = dir.join(format!("{param}.svg"));
        std::fs::write(&path, render_svg(param, &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
