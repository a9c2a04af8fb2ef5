//! Accuracy curves as standalone SVG plus a merged CSV of all runs.
//!
//! Output is a pure function of the input metrics: fixed palette, fixed
//! layout and fixed number formatting, so the same runs give the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::experiment::{io_err, ExperimentError, METRICS_FILE, SUMMARY_FILE};
use crate::training::{MetricRow, METRICS_HEADER};

/// Right edge of the early-epoch panel.
pub const EARLY_EPOCHS: u64 = 5_000;
pub const FULL_SVG_FILE: &str = "test_accuracy_full.svg";
pub const EARLY_SVG_FILE: &str = "test_accuracy_early.svg";
pub const COMBINED_FILE: &str = "combined_metrics.csv";

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub rows: Vec<MetricRow>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .collect::<Result<Vec<MetricRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> ExperimentError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => ExperimentError::Io {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        ExperimentError::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Loads the runs under each input path. A path is either a run directory
/// (holding `metrics.csv`) or a sweep directory whose children are runs.
pub fn collect_series(inputs: &[PathBuf]) -> Result<Vec<Series>, ExperimentError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.join(METRICS_FILE).is_file() {
            out.extend(load_run(input)?);
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(input)
            .map_err(io_err(input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        if children.is_empty() {
            return Err(ExperimentError::Config(format!("{} holds no {METRICS_FILE}", input.display())));
        }
        children.sort();
        for c in children {
            out.extend(load_run(&c)?);
        }
    }
    if out.is_empty() {
        return Err(ExperimentError::Config("no run with recorded metrics to plot".into()));
    }
    Ok(out)
}

fn load_run(dir: &Path) -> Result<Option<Series>, ExperimentError> {
    let rows = read_metrics(&dir.join(METRICS_FILE))?;
    if rows.is_empty() {
        warn!("{}: empty metrics, skipped", dir.display());
        return Ok(None);
    }
    let summary = dir.join(SUMMARY_FILE);
    let label = fs::read_to_string(&summary)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| Some(format!("{} seed {}", v.get("name")?.as_str()?, v.get("seed")?.as_u64()?)))
        .unwrap_or_else(|| dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned()));
    Ok(Some(Series { label, rows }))
}

pub fn combined_csv(series: &[Series]) -> String {
    let mut s = format!("run,{METRICS_HEADER}\n");
    for run in series {
        let label = csv_field(&run.label);
        for m in &run.rows {
            writeln!(
                s,
                "{label},{},{},{},{},{},{},{}",
                m.epoch, m.train_loss, m.test_loss, m.train_acc, m.test_acc, m.res_norm, m.max_logit
            )
            .unwrap();
        }
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

fn xml_escape(v: &str) -> String {
    v.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round axis maximum with 1, 2 or 5 times a power of ten per tick.
fn nice_ticks(max: u64) -> (u64, u64) {
    let max = max.max(1);
    let raw = max.div_ceil(5);
    let mut step = 1u64;
    loop {
        for m in [1, 2, 5] {
            if step * m >= raw {
                let s = step * m;
                return (s, max.div_ceil(s) * s);
            }
        }
        step *= 10;
    }
}

/// Test-accuracy overlay, one labelled polyline per run. With `cap` the
/// x-axis ends at that epoch.
pub fn accuracy_svg(series: &[Series], cap: Option<u64>) -> String {
    let last = series.iter().flat_map(|s| s.rows.iter().map(|r| r.epoch)).max().unwrap_or(0);
    let (step, x_max) = nice_ticks(cap.map_or(last, |c| c.min(last)));
    let x_max = cap.map_or(x_max, |c| x_max.min(c));
    let x0 = MARGIN_L;
    let sx = |e: u64| x0 + PANEL_W * e as f64 / x_max as f64;
    let sy = |a: f64| MARGIN_T + PANEL_H * (1.0 - a.clamp(0.0, 1.0));
    let title = match cap {
        Some(c) => format!("Test accuracy, epochs 0 to {c}"),
        None => "Test accuracy, full run".to_string(),
    };
    let width = MARGIN_L + PANEL_W + 20.0;
    let height = MARGIN_T + PANEL_H + MARGIN_B + 18.0 * series.len() as f64 + 10.0;

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#, x0 + PANEL_W / 2.0, MARGIN_T - 14.0, xml_escape(&title)).unwrap();
    writeln!(svg, r#"<text x="16.0" y="{0:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16.0 {0:.1})">test accuracy</text>"#, MARGIN_T + PANEL_H / 2.0).unwrap();
    writeln!(svg, r##"<rect x="{x0:.1}" y="{MARGIN_T:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="#333"/>"##).unwrap();
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = sy(a);
        writeln!(svg, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, x0 + PANEL_W).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{a:.2}</text>"#, x0 - 6.0, y + 4.0).unwrap();
    }
    let mut e = 0;
    while e <= x_max {
        let x = sx(e);
        writeln!(svg, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/>"##, MARGIN_T + PANEL_H, MARGIN_T + PANEL_H + 5.0).unwrap();
        writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{e}</text>"#, MARGIN_T + PANEL_H + 18.0).unwrap();
        e += step;
    }
    writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#, x0 + PANEL_W / 2.0, MARGIN_T + PANEL_H + 38.0).unwrap();

    let legend_top = MARGIN_T + PANEL_H + MARGIN_B;
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let label = xml_escape(&s.label);
        let pts: Vec<String> = s
            .rows
            .iter()
            .filter(|r| r.epoch <= x_max)
            .map(|r| format!("{:.2},{:.2}", sx(r.epoch), sy(r.test_acc)))
            .collect();
        writeln!(
            svg,
            r#"<polyline data-label="{label}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let y = legend_top + 18.0 * i as f64;
        writeln!(svg, r#"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{colour}" stroke-width="3"/>"#, x0 + 24.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="12">{label}</text>"#, x0 + 32.0, y + 4.0).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the full-run and early-window SVGs plus the merged CSV into `out`.
pub fn write_plots(series: &[Series], out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let files = [
        (out.join(FULL_SVG_FILE), accuracy_svg(series, None)),
        (out.join(EARLY_SVG_FILE), accuracy_svg(series, Some(EARLY_EPOCHS))),
        (out.join(COMBINED_FILE), combined_csv(series)),
    ];
    let mut written = Vec::new();
    for (path, text) in files {
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
