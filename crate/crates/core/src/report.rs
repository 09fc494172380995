//! Comparison tables across seeds and SVG training curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::median;
use crate::trainer::TrainRecord;

/// Arms in the order they appear in tables.
pub const ARMS: [&str; 4] = ["teacher", "slkd", "kd", "student"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    /// `(seed, final top-1 accuracy)`
    pub per_seed: Vec<(u64, f64)>,
    pub median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Groups `(method, seed, accuracy)` triples; medians are computed here,
    /// never taken from the input. Methods keep first-seen order.
    pub fn from_results(results: &[(String, u64, f64)]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        for (method, seed, acc) in results {
            if !groups.contains_key(method) {
                order.push(method.clone());
            }
            groups.entry(method.clone()).or_default().push((*seed, *acc));
        }
        let rows = order
            .into_iter()
            .map(|method| {
                let mut per_seed = groups.remove(&method).unwrap_or_default();
                per_seed.sort_by_key(|p| p.0);
                let accs: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
                ComparisonRow {
                    median: median(&accs).unwrap_or(f64::NAN),
                    method,
                    per_seed,
                }
            })
            .collect();
        ComparisonTable { rows }
    }

    /// Reads `<dir>/<arm>/record.csv` for every arm present in each run
    /// directory; the seed is taken from a `-s<seed>` directory suffix, or the
    /// position in `run_dirs` otherwise.
    pub fn from_run_dirs(run_dirs: &[&Path]) -> Result<Self> {
        let mut results = Vec::new();
        for (i, dir) in run_dirs.iter().enumerate() {
            let seed = seed_from_dir(dir).unwrap_or(i as u64);
            for arm in ARMS {
                let path = dir.join(arm).join("record.csv");
                if !path.exists() {
                    continue;
                }
                let record = TrainRecord::load(&path)?;
                let acc = record.final_accuracy().ok_or_else(|| Error::Format {
                    path: path.clone(),
                    message: "record has no rows".into(),
                })?;
                results.push((arm.to_string(), seed, acc));
            }
        }
        if results.is_empty() {
            return Err(Error::InvalidArgument("no run records found".into()));
        }
        Ok(Self::from_results(&results))
    }

    pub fn get(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_markdown(&self) -> String {
        let mut seeds: Vec<u64> = self.rows.iter().flat_map(|r| r.per_seed.iter().map(|p| p.0)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = String::from("| method |");
        for s in &seeds {
            let _ = write!(out, " seed {s} |");
        }
        out.push_str(" median |\n|---|");
        out.push_str(&"---|".repeat(seeds.len() + 1));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} |", r.method);
            for s in &seeds {
                match r.per_seed.iter().find(|p| p.0 == *s) {
                    Some((_, a)) => {
                        let _ = write!(out, " {:.2} |", 100.0 * a);
                    }
                    None => out.push_str(" - |"),
                }
            }
            let _ = writeln!(out, " {:.2} |", 100.0 * r.median);
        }
        out
    }
}

fn seed_from_dir(dir: &Path) -> Option<u64> {
    let name = dir.file_name()?.to_str()?;
    name.rsplit_once("-s")?.1.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TrainLoss,
    TestAccuracy,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::TrainLoss => "train loss",
            Metric::TestAccuracy => "test accuracy",
        }
    }

    fn value(self, r: &crate::trainer::EpochRecord) -> f64 {
        match self {
            Metric::TrainLoss => r.train_loss,
            Metric::TestAccuracy => r.test_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    /// `metric` against cumulative iterations.
    pub fn from_record(label: &str, record: &TrainRecord, metric: Metric) -> Self {
        Series {
            label: label.into(),
            points: record
                .rows
                .iter()
                .map(|r| (r.cum_iters as f64, metric.value(r)))
                .collect(),
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 45.0;

/// Data range widened by 5% on each side; a degenerate range gets a unit
/// window around its value.
pub fn padded_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    let span = hi - lo;
    if span == 0.0 {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo - 0.05 * span, hi + 0.05 * span))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of several series against cumulative iterations.
pub fn plot_svg(series: &[Series], metric: Metric) -> Result<String> {
    let xr = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let ((x0, x1), (y0, y1)) = match (xr, yr) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::InvalidArgument("nothing to plot".into())),
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            sx(xv),
            TOP + ph + 15.0,
            xv
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            LEFT - 4.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">cumulative iterations</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        metric.label()
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).copied().collect();
        if pts.len() == 1 {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(pts[0].0),
                sy(pts[0].1)
            );
        } else if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = TOP + 12.0 + 16.0 * k as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
