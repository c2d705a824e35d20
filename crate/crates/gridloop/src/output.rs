//! Run artefacts: `report.csv`, `report.json`, `rtt.svg` and
//! `throughput.svg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::bench::{BenchReport, Sample};
use crate::scenario::MeasurementKind;

pub const CSV_HEADER: [&str; 5] = ["measurement", "node_count", "repeat", "value", "unit"];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {msg}")]
    Row { row: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub measurement: MeasurementKind,
    pub node_count: u32,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single sample.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Per (measurement, node count) statistics, ordered by both.
pub fn aggregate(samples: &[Sample]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(MeasurementKind, u32), Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.measurement, s.node_count)).or_default().push(s.value);
    }
    groups
        .into_iter()
        .map(|((measurement, node_count), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Aggregate { measurement, node_count, n, mean, sd, min, max }
        })
        .collect()
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

/// `v` as it reads back from the CSV, so aggregates of a report and of its
/// CSV agree.
pub fn quantize(v: f64) -> f64 {
    fmt_value(v).parse().expect("formatted float")
}

pub fn csv_string(samples: &[Sample]) -> Result<String, OutputError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for s in samples {
        w.write_record([
            s.measurement.as_str(),
            &s.node_count.to_string(),
            &s.repeat.to_string(),
            &fmt_value(s.value),
            s.measurement.unit(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| OutputError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
}

pub fn parse_csv(text: &str) -> Result<Vec<Sample>, OutputError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(OutputError::Row { row: 0, msg: format!("header must be {}", CSV_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| OutputError::Row { row: i + 1, msg };
        let measurement = match &rec[0] {
            "rtt" => MeasurementKind::Rtt,
            "bulk_throughput" => MeasurementKind::BulkThroughput,
            m => return Err(bad(format!("unknown measurement {m:?}"))),
        };
        if rec[4] != *measurement.unit() {
            return Err(bad(format!("unit {:?} does not fit {measurement}", &rec[4])));
        }
        out.push(Sample {
            measurement,
            node_count: rec[1].parse().map_err(|e| bad(format!("node_count: {e}")))?,
            repeat: rec[2].parse().map_err(|e| bad(format!("repeat: {e}")))?,
            value: rec[3].parse().map_err(|e| bad(format!("value: {e}")))?,
        });
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn label(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Line plot of mean ± sd against node count. Without data only the axes
/// are drawn.
pub fn svg_plot(title: &str, y_label: &str, points: &[Aggregate]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, W / 2.0);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">node count</text>"#, (x0 + x1) / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    if !points.is_empty() {
        let xs: Vec<f64> = points.iter().map(|p| p.node_count as f64).collect();
        let (xmin, xmax) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let ymax = points.iter().map(|p| p.mean + p.sd).fold(0.0, f64::max).max(f64::MIN_POSITIVE) * 1.1;
        let px = |x: f64| if xmax > xmin { x0 + (x - xmin) / (xmax - xmin) * (x1 - x0) } else { (x0 + x1) / 2.0 };
        let py = |y: f64| y0 - y / ymax * (y0 - y1);
        for t in ticks(0.0, ymax) {
            let y = py(t);
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##);
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, label(t));
        }
        for p in points {
            let x = px(p.node_count as f64);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y0 + 18.0, p.node_count);
            let (lo, hi) = (py((p.mean - p.sd).max(0.0)), py(p.mean + p.sd));
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="#1f77b4"/>"##);
            for y in [lo, hi] {
                let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#1f77b4"/>"##, x - 5.0, x + 5.0);
            }
        }
        let path: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.node_count as f64), py(p.mean))).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, path.join(" "));
        for p in points {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, px(p.node_count as f64), py(p.mean));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct JsonReport<'a> {
    #[serde(flatten)]
    report: &'a BenchReport,
    aggregates: Vec<Aggregate>,
    wall_ms_per_sim_ms: f64,
    passed: bool,
}

pub fn report_json(report: &BenchReport) -> String {
    let j = JsonReport {
        report,
        aggregates: aggregate(&report.samples),
        wall_ms_per_sim_ms: report.wall_ms_per_sim_ms(),
        passed: report.passed(),
    };
    serde_json::to_string_pretty(&j).expect("plain data")
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, OutputError> {
    fs::write(&path, text).map_err(|source| OutputError::Write { path: path.clone(), source })?;
    Ok(path)
}

/// Write all artefacts into `dir`, creating it if needed.
pub fn emit(report: &BenchReport, dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Write { path: dir.to_path_buf(), source })?;
    let aggs = aggregate(&report.samples);
    let only = |k: MeasurementKind| aggs.iter().filter(|a| a.measurement == k).cloned().collect::<Vec<_>>();
    Ok(vec![
        write(dir.join("report.csv"), &csv_string(&report.samples)?)?,
        write(dir.join("report.json"), &report_json(report))?,
        write(dir.join("rtt.svg"), &svg_plot("Average round-trip time", "RTT (ms)", &only(MeasurementKind::Rtt)))?,
        write(
            dir.join("throughput.svg"),
            &svg_plot("Bulk throughput", "throughput (kB/s)", &only(MeasurementKind::BulkThroughput)),
        )?,
    ])
}
