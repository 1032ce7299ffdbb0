use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discretizer::SegmentationGrid;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::trainer::LossRecord;

/// One row of `schedule.csv`. `dt` is `t_i − t_{i−1}` and is blank for `i = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub index: usize,
    pub t: f64,
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub x: f64,
    pub y: f64,
    pub step_count: usize,
}

pub fn schedule_rows(grid: &SegmentationGrid) -> Vec<ScheduleRow> {
    let t = grid.times();
    (0..t.len())
        .map(|i| ScheduleRow {
            index: i,
            t: t[i],
            dt: (i > 0).then(|| t[i] - t[i - 1]),
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_schedule_csv(path: &Path, grid: Option<&SegmentationGrid>) -> Result<()> {
    let rows = grid.map(schedule_rows).unwrap_or_default();
    write_rows(path, &["index", "t", "dt"], &rows)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    write_rows(path, &["step", "loss", "lambda", "grid_id"], history)
}

/// Rows must be 2-D points.
pub fn write_samples_csv(path: &Path, samples: Option<(&Tensor, usize)>) -> Result<()> {
    let rows: Vec<SampleRow> = match samples {
        Some((x, steps)) => x
            .iter_rows()
            .map(|r| SampleRow {
                x: r[0],
                y: r.get(1).copied().unwrap_or(0.0),
                step_count: steps,
            })
            .collect(),
        None => Vec::new(),
    };
    write_rows(path, &["x", "y", "step_count"], &rows)
}

pub fn read_schedule_csv(path: &Path) -> Result<Vec<ScheduleRow>> {
    read_rows(path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    read_rows(path)
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRow>> {
    read_rows(path)
}

/// Everything a run can export; absent parts produce header-only CSVs.
#[derive(Clone, Copy, Debug, Default)]
pub struct Diagnostics<'a> {
    pub grid: Option<&'a SegmentationGrid>,
    pub history: &'a [LossRecord],
    pub samples: Option<(&'a Tensor, usize)>,
    pub svg: bool,
}

/// Writes `schedule.csv`, `loss.csv`, `samples.csv` and, if requested, SVG
/// plots of each into `dir`. Returns the written paths.
pub fn export_diagnostics(dir: &Path, diag: &Diagnostics<'_>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let schedule = dir.join("schedule.csv");
    write_schedule_csv(&schedule, diag.grid)?;
    written.push(schedule);
    let loss = dir.join("loss.csv");
    write_loss_csv(&loss, diag.history)?;
    written.push(loss);
    let samples = dir.join("samples.csv");
    write_samples_csv(&samples, diag.samples)?;
    written.push(samples);
    if diag.svg {
        written.extend(plots_from_csv(dir, dir)?);
    }
    Ok(written)
}

/// Renders `schedule.svg`, `loss.svg` and `samples.svg` from whichever of
/// the three CSVs exist in `csv_dir`.
pub fn plots_from_csv(csv_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let schedule = csv_dir.join("schedule.csv");
    if schedule.exists() {
        let pts: Vec<(f64, f64)> = read_schedule_csv(&schedule)?
            .windows(2)
            .map(|w| (0.5 * (w[0].t + w[1].t), w[1].t - w[0].t))
            .collect();
        let plot = Plot {
            title: "Segment width",
            x_label: "segment midpoint t",
            y_label: "Δt",
            log_x: true,
            log_y: true,
            style: Style::LineWithMarkers,
        };
        written.push(write_svg(out_dir, "schedule.svg", &plot.render(&pts))?);
    }
    let loss = csv_dir.join("loss.csv");
    if loss.exists() {
        let pts: Vec<(f64, f64)> = read_loss_csv(&loss)?.iter().map(|r| (r.step as f64, r.loss)).collect();
        let plot = Plot {
            title: "Training loss",
            x_label: "step",
            y_label: "loss",
            log_x: false,
            log_y: true,
            style: Style::Line,
        };
        written.push(write_svg(out_dir, "loss.svg", &plot.render(&pts))?);
    }
    let samples = csv_dir.join("samples.csv");
    if samples.exists() {
        let pts: Vec<(f64, f64)> = read_samples_csv(&samples)?.iter().map(|r| (r.x, r.y)).collect();
        let plot = Plot {
            title: "Samples",
            x_label: "x",
            y_label: "y",
            log_x: false,
            log_y: false,
            style: Style::Scatter,
        };
        written.push(write_svg(out_dir, "samples.svg", &plot.render(&pts))?);
    }
    Ok(written)
}

fn write_svg(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Line,
    LineWithMarkers,
    Scatter,
}

/// Minimal self-contained SVG chart.
#[derive(Clone, Copy, Debug)]
pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_x: bool,
    pub log_y: bool,
    pub style: Style,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 64.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-2..1e4).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.05 * (hi - lo);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    /// Fraction of the axis length, or `None` for values a log axis cannot show.
    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log { v.log10() } else { v };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, f64)> {
        (0..=4)
            .map(|k| {
                let f = k as f64 / 4.0;
                let raw = self.lo + f * (self.hi - self.lo);
                (f, if self.log { 10f64.powf(raw) } else { raw })
            })
            .collect()
    }
}

impl Plot<'_> {
    pub fn render(&self, points: &[(f64, f64)]) -> String {
        let xa = Axis::fit(points.iter().map(|p| p.0), self.log_x);
        let ya = Axis::fit(points.iter().map(|p| p.1), self.log_y);
        let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let px = |f: f64| MARGIN + f * pw;
        let py = |f: f64| HEIGHT - MARGIN - f * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for (f, v) in xa.ticks() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(f),
                HEIGHT - MARGIN + 16.0,
                tick_label(v)
            );
        }
        for (f, v) in ya.ticks() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 6.0,
                py(f) + 4.0,
                tick_label(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(self.y_label)
        );
        let coords: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|&(x, y)| Some((px(xa.frac(x)?), py(ya.frac(y)?))))
            .collect();
        if matches!(self.style, Style::Line | Style::LineWithMarkers) && coords.len() > 1 {
            let path: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        if matches!(self.style, Style::Scatter | Style::LineWithMarkers) {
            let r = if self.style == Style::Scatter { 1.5 } else { 2.5 };
            for (x, y) in &coords {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="steelblue"/>"#);
            }
        }
        s.push_str("</svg>\n");
        s
    }
}
