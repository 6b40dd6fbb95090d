//! Experiment summaries and their CSV, SVG and verdict outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::trainer::{fmt_f64, rows_to_csv, RunRow};

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct EmitError {
    pub path: String,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.replace([',', '\n'], ";"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plot {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn new(name: &str, x_label: &str, y_label: &str, log_x: bool, log_y: bool) -> Self {
        Self {
            name: name.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x,
            log_y,
            series: Vec::new(),
        }
    }

    pub fn add(&mut self, label: impl Into<String>, points: Vec<(f64, f64)>) {
        self.series.push(Series { label: label.into(), points });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Informational checks are reported but never fail a run.
    pub asserted: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    pub fn asserted(name: impl Into<String>, passed: bool, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, asserted: true, value, bound, detail: detail.into() }
    }

    pub fn info(name: impl Into<String>, passed: bool, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, asserted: false, value, bound, detail: detail.into() }
    }
}

/// Trainer rows of one cell, emitted as `<experiment>_<key>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRun {
    pub key: String,
    pub rows: Vec<RunRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub tables: Vec<Table>,
    pub plots: Vec<Plot>,
    pub checks: Vec<Check>,
    pub runs: Vec<CellRun>,
    /// Cells excluded from fits because they hit a cap.
    pub censored: usize,
    pub failed_cells: Vec<String>,
    pub notes: Vec<String>,
}

impl Summary {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.into(),
            tables: Vec::new(),
            plots: Vec::new(),
            checks: Vec::new(),
            runs: Vec::new(),
            censored: 0,
            failed_cells: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// All asserted checks pass and no cell failed.
    pub fn passed(&self) -> bool {
        self.failed_cells.is_empty() && self.checks.iter().all(|c| c.passed || !c.asserted)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Summary CSV: one row per check.
    pub fn checks_csv(&self) -> String {
        let mut t = Table::new("summary", &["check", "asserted", "passed", "value", "bound", "detail"]);
        for c in &self.checks {
            t.push(vec![
                c.name.as_str().into(),
                Cell::Int(i64::from(c.asserted)),
                Cell::Int(i64::from(c.passed)),
                c.value.into(),
                c.bound.into(),
                c.detail.as_str().into(),
            ]);
        }
        t.to_csv()
    }

    pub fn verdict_json(&self) -> String {
        #[derive(Serialize)]
        struct Verdict<'a> {
            experiment: &'a str,
            passed: bool,
            censored: usize,
            failed_cells: &'a [String],
            checks: &'a [Check],
            notes: &'a [String],
        }
        let v = Verdict {
            experiment: &self.experiment,
            passed: self.passed(),
            censored: self.censored,
            failed_cells: &self.failed_cells,
            checks: &self.checks,
            notes: &self.notes,
        };
        serde_json::to_string_pretty(&v).expect("verdict serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub svg: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self { csv: true, svg: true }
    }
}

impl std::str::FromStr for Formats {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut f = Formats { csv: false, svg: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "csv" => f.csv = true,
                "svg" => f.svg = true,
                other => return Err(format!("unknown format '{other}'")),
            }
        }
        Ok(f)
    }
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<(), EmitError> {
    std::fs::write(&path, contents).map_err(|source| EmitError { path: path.display().to_string(), source })?;
    written.push(path);
    Ok(())
}

/// Write the summary into `dir`; returns the files written in order.
///
/// CSV: `<experiment>_summary.csv`, one file per table and one per cell run.
/// SVG: one chart per plot with at least one nonempty series.
/// `verdict.json` is always written.
pub fn emit(summary: &Summary, dir: &Path, formats: Formats) -> Result<Vec<PathBuf>, EmitError> {
    std::fs::create_dir_all(dir).map_err(|source| EmitError { path: dir.display().to_string(), source })?;
    let exp = &summary.experiment;
    let mut written = Vec::new();
    if formats.csv {
        write(dir.join(format!("{exp}_summary.csv")), &summary.checks_csv(), &mut written)?;
        for t in &summary.tables {
            write(dir.join(format!("{exp}_{}.csv", t.name)), &t.to_csv(), &mut written)?;
        }
        for r in &summary.runs {
            write(dir.join(format!("{exp}_{}.csv", r.key)), &rows_to_csv(&r.rows), &mut written)?;
        }
    }
    if formats.svg {
        for p in &summary.plots {
            if p.series.iter().any(|s| !s.points.is_empty()) {
                write(dir.join(format!("{exp}_{}.svg", p.name)), &render_svg(p), &mut written)?;
            }
        }
    }
    write(dir.join("verdict.json"), &summary.verdict_json(), &mut written)?;
    Ok(written)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { log, lo, hi }
    }

    fn map(&self, v: f64, start: f64, len: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        start + (v - self.lo) / (self.hi - self.lo) * len
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0);
            let mut out = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push((10f64.powf(e), format!("1e{}", e as i64)));
                e += step;
            }
            out
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

/// Line chart; nonpositive values are dropped on log axes.
pub fn render_svg(plot: &Plot) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (80.0, 160.0, 30.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let keep = |&(x, y): &(f64, f64)| {
        x.is_finite() && y.is_finite() && (!plot.log_x || x > 0.0) && (!plot.log_y || y > 0.0)
    };
    let series: Vec<(String, Vec<(f64, f64)>)> = plot
        .series
        .iter()
        .map(|s| (s.label.clone(), s.points.iter().copied().filter(keep).collect()))
        .collect();
    let xa = Axis::fit(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)), plot.log_x);
    let ya = Axis::fit(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)), plot.log_y);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (v, label) in xa.ticks() {
        let x = xa.map(v, left, pw);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            top + ph,
            top + ph + 16.0
        );
    }
    for (v, label) in ya.ticks() {
        let y = top + ph - ya.map(v, 0.0, ph);
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&plot.y_label)
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", xa.map(x, left, pw), top + ph - ya.map(y, 0.0, ph)))
            .collect();
        if !coords.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 35.0,
            ly + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_summary_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = Summary::new("audit");
        let files = emit(&s, dir.path(), Formats::default()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("audit_summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(files.iter().all(|f| f.extension().unwrap() != "svg"));
    }

    #[test]
    fn svg_has_polyline_per_series() {
        let mut p = Plot::new("m", "T", "y", true, true);
        p.add("a", vec![(1.0, 1.0), (10.0, 0.1)]);
        p.add("b", vec![(1.0, 2.0), (10.0, 0.0)]);
        let svg = render_svg(&p);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn formats_parse() {
        assert_eq!("csv".parse::<Formats>().unwrap(), Formats { csv: true, svg: false });
        assert!("png".parse::<Formats>().is_err());
    }
}
