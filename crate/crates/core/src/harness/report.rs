use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One rate-distortion point of a named series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub series: String,
    pub lambda: f64,
    pub rate_bits_per_entry: f64,
    pub estimated_entropy: f64,
    pub nmse_db: f64,
    pub rho: f64,
}

pub const CSV_HEADER: &str = "series,lambda,rate_bits_per_entry,estimated_entropy,nmse_db,rho";

/// Six significant digits, fixed notation for moderate magnitudes.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).expect("exponent");
    if (-4..6).contains(&exp) {
        format!("{:.*}", (5 - exp) as usize, v)
    } else {
        sci
    }
}

pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let series = if r.series.contains([',', '"', '\n']) {
            format!("\"{}\"", r.series.replace('"', "\"\""))
        } else {
            r.series.clone()
        };
        let _ = writeln!(
            out,
            "{series},{},{},{},{},{}",
            sig6(r.lambda),
            sig6(r.rate_bits_per_entry),
            sig6(r.estimated_entropy),
            sig6(r.nmse_db),
            sig6(r.rho)
        );
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 55.0;

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// NMSE (dB) against feedback rate, one polyline and marker set per series.
pub fn render_svg(rows: &[ResultRow]) -> String {
    let mut series: Vec<&str> = Vec::new();
    for r in rows {
        if !series.contains(&r.series.as_str()) {
            series.push(&r.series);
        }
    }
    let (x0, x1) = axis_range(rows.iter().map(|r| r.rate_bits_per_entry));
    let (y0, y1) = axis_range(rows.iter().map(|r| r.nmse_db));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (gx, gy) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{gx:.2}" y1="{:.2}" x2="{gx:.2}" y2="{:.2}" stroke="black"/><text x="{gx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 20.0,
            format_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{gy:.2}" x2="{LEFT}" y2="{gy:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            gy + 4.0,
            format_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">rate (bits/entry)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">NMSE (dB)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (k, name) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.series == *name)
            .map(|r| (px(r.rate_bits_per_entry), py(r.nmse_db)))
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
        }
        let ly = TOP + 15.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape_xml(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

fn write(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the CSV table and the SVG plot for `rows`.
pub fn emit_results(rows: &[ResultRow], csv: &Path, svg: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    write(csv, &render_csv(rows))?;
    write(svg, &render_svg(rows))
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub code_version: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, seed: u64, outputs: Vec<String>) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        Self {
            command: command.into(),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        write(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}
