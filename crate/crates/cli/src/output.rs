//! Run-directory artifacts: CSV tables, SVG charts and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};
use smoothlearn::learn::CHECKPOINT_MAGIC;
use smoothlearn::tasks::DATASET_FORMAT_VERSION;

use crate::config::RunConfig;
use crate::CliError;

/// Version of the CSV layouts written by this crate.
pub const CSV_FORMAT_VERSION: u32 = 1;

/// Writes a CSV with `header` and `rows` (already formatted cells).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Shortest round-trip text of a float; stable across runs.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Writes `<name>.config.txt` (the resolved-config echo) and
/// `<name>.run.json` (command, seed, format versions and hashes of the input
/// files), where `name` is the subcommand.
pub fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[&Path],
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = command.split_whitespace().next().unwrap_or(command);
    let echo = dir.join(format!("{name}.config.txt"));
    fs::write(&echo, config.echo()).map_err(|e| CliError::io(&echo, e))?;
    let mut hashes = serde_json::Map::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), json!(file_hash(p)?));
    }
    let manifest = json!({
        "command": command,
        "seed": config.seed(),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "formats": {
            "dataset": DATASET_FORMAT_VERSION,
            "checkpoint": CHECKPOINT_MAGIC,
            "csv": CSV_FORMAT_VERSION,
        },
        "inputs_sha256": hashes,
    });
    let path = dir.join(format!("{name}.run.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(())
}

/// One bar with a symmetric error whisker.
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: f64,
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 70.0;
const BOTTOM: f64 = 90.0;
const TOP: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn y_axis(s: &mut String, lo: f64, hi: f64, label: &str) {
    let plot_h = H - TOP - BOTTOM;
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>",
        H - BOTTOM
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - plot_h * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            LEFT - 5.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{}</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(label)
    );
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Bar chart with error whiskers, bars starting at zero.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut s = svg_open(title);
    let hi = bars
        .iter()
        .map(|b| b.value + b.err)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.1;
    y_axis(&mut s, 0.0, hi, y_label);
    let plot_w = W - LEFT - 20.0;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / bars.len().max(1) as f64;
    let y_of = |v: f64| H - BOTTOM - plot_h * (v / hi).clamp(0.0, 1.0);
    for (i, b) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let bw = slot * 0.7;
        if b.value.is_finite() {
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"#4477aa\"/>",
                y_of(b.value),
                H - BOTTOM - y_of(b.value)
            );
            let cx = x + bw / 2.0;
            let _ = writeln!(
                s,
                "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                y_of(b.value - b.err),
                y_of(b.value + b.err)
            );
        }
        let lx = x + bw / 2.0;
        let ly = H - BOTTOM + 12.0;
        let _ = writeln!(
            s,
            "<text x=\"{lx:.2}\" y=\"{ly:.2}\" transform=\"rotate(30 {lx:.2} {ly:.2})\">{}</text>",
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A named polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: &[&str] = &[
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377",
];

/// Line chart on a logarithmic y axis when `log_y`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_y: bool,
) -> String {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let finite = |v: &f64| v.is_finite();
    let (x_lo, x_hi) = pts()
        .map(|p| p.0)
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    let (y_lo, y_hi) = pts()
        .map(|p| tf(p.1))
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
            (a.min(y), b.max(y))
        });
    let mut s = svg_open(title);
    if !x_lo.is_finite() || !y_lo.is_finite() {
        s.push_str("</svg>\n");
        return s;
    }
    let x_span = (x_hi - x_lo).max(1e-12);
    let y_span = (y_hi - y_lo).max(1e-12);
    let axis_label = if log_y {
        format!("log10 {y_label}")
    } else {
        y_label.to_string()
    };
    y_axis(&mut s, y_lo, y_hi, &axis_label);
    let plot_w = W - LEFT - 140.0;
    let plot_h = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + plot_w * (x - x_lo) / x_span;
    let py = |y: f64| H - BOTTOM - plot_h * (tf(y) - y_lo) / y_span;
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{b}\" x2=\"{}\" y2=\"{b}\" stroke=\"black\"/>",
        LEFT + plot_w,
        b = H - BOTTOM
    );
    for (v, anchor) in [(x_lo, "start"), (x_hi, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>",
            px(v),
            H - BOTTOM + 14.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        LEFT + plot_w / 2.0,
        H - BOTTOM + 34.0,
        escape(x_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && tf(p.1).is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{ly:.2}\" fill=\"{color}\">{}</text>",
            LEFT + plot_w + 10.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
