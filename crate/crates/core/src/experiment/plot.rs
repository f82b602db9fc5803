//! Static SVG charts. Output depends only on the input values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{load_reports, ExperimentError, LOG_FILE};
use crate::eval::RunReport;
use crate::train::ModelId;

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 340.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    s
}

/// Bar chart of parameter counts, each bar labelled with its exact count.
pub fn params_svg(title: &str, bars: &[(String, usize)]) -> String {
    let mut s = header(title);
    let max = bars.iter().map(|b| b.1).max().unwrap_or(1).max(1) as f64;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;
    let base = HEIGHT - BOTTOM;
    writeln!(s, r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, WIDTH - RIGHT).unwrap();
    for (i, (label, count)) in bars.iter().enumerate() {
        let h = plot_h * *count as f64 / max;
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let cx = x + w / 2.0;
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
            base - h,
            COLORS[i % COLORS.len()]
        )
        .unwrap();
        writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{count}</text>"#, base - h - 5.0).unwrap();
        writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, base + 18.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Test accuracy per epoch for every model in a `log.tsv`.
pub fn accuracy_svg(title: &str, log: &str) -> Result<String, ExperimentError> {
    let mut series: BTreeMap<ModelId, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in log.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = || -> Option<(ModelId, f64, f64)> {
            if fields.len() != 4 {
                return None;
            }
            Some((fields[1].parse().ok()?, fields[0].parse().ok()?, fields[3].parse().ok()?))
        };
        let (id, epoch, acc) = parse().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("malformed log line {}: {line:?}", i + 1))
        })?;
        series.entry(id).or_default().push((epoch, acc));
    }
    let epochs = series.values().flat_map(|v| v.iter().map(|p| p.0)).fold(1.0f64, f64::max);
    let (plot_w, plot_h) = (WIDTH - LEFT - RIGHT - 90.0, HEIGHT - TOP - BOTTOM);
    let x = |e: f64| LEFT + plot_w * if epochs > 1.0 { (e - 1.0) / (epochs - 1.0) } else { 0.0 };
    let y = |a: f64| TOP + plot_h * (1.0 - a / 100.0);

    let mut s = header(title);
    writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#).unwrap();
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{tick}</text>"#, LEFT - 6.0, y(tick) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{LEFT}" y="{}">1</text>"#, HEIGHT - BOTTOM + 16.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{epochs}</text>"#, LEFT + plot_w, HEIGHT - BOTTOM + 16.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, LEFT + plot_w / 2.0, HEIGHT - 12.0).unwrap();
    for (i, (id, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points.iter().map(|&(e, a)| format!("{:.2},{:.2}", x(e), y(a))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = LEFT + plot_w + 12.0;
        writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 14.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{id}</text>"#, lx + 18.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn param_bars(report: &RunReport) -> Vec<(String, usize)> {
    let mut bars: Vec<(String, usize)> = report.models.iter().map(|m| (m.id.row_label(), m.params)).collect();
    bars.push(("Students combined".into(), report.student_params()));
    bars
}

/// Writes `params_<preset>.svg` into each experiment directory and
/// `accuracy.svg` next to each run's log. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let reports = load_reports(dir)?;
    let mut written = Vec::new();
    let mut per_experiment: BTreeMap<(PathBuf, String), &RunReport> = BTreeMap::new();
    for (path, report) in &reports {
        let cell = path.parent().expect("report lives in a run directory");
        let experiment = cell.parent().and_then(Path::parent).unwrap_or(cell).to_path_buf();
        let slot = per_experiment.entry((experiment, report.preset.clone())).or_insert(report);
        if slot.teacher_params().is_none() && report.teacher_params().is_some() {
            *slot = report;
        }
        let log_path = cell.join(LOG_FILE);
        if log_path.is_file() {
            let title = format!("{} {} seed {}: test accuracy", report.preset, report.mode, report.seed);
            let out = cell.join("accuracy.svg");
            fs::write(&out, accuracy_svg(&title, &fs::read_to_string(&log_path)?)?)?;
            written.push(out);
        }
    }
    for ((experiment, preset), report) in per_experiment {
        let out = experiment.join(format!("params_{preset}.svg"));
        fs::write(&out, params_svg(&format!("{preset}: parameter counts"), &param_bars(report)))?;
        written.push(out);
    }
    Ok(written)
}
