//! Dependency-free SVG line charts for the sweep tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{parse_psnr_csv, parse_rd_csv, Manifest};
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Padded `[lo, hi]` covering every value; a single value gets a unit-wide window.
pub fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 8.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one chart; markers for every point, polylines joining each series.
pub fn render_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xr = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * pw;
    let py = |y: f64| TOP + ph - (y - yr.0) / (yr.1 - yr.0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-x-range="{} {}" data-y-range="{} {}">"#,
        xr.0, xr.1, yr.0, yr.1
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in ticks(xr.0, xr.1) {
        let x = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif">{t}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 16.0
        );
    }
    for t in ticks(yr.0, yr.1) {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" font-size="11" text-anchor="end" font-family="sans-serif">{t}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        LEFT + pw / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" font-size="13" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = ser.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = TOP + 12.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{ly}" font-size="12" font-family="sans-serif">{}</text>"#,
            ly - 5.0,
            lx + 18.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Group rows into series by key, keeping first-appearance order.
fn group<T>(rows: &[T], key: impl Fn(&T) -> String, point: impl Fn(&T) -> (f64, f64)) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|s| s.label == k) {
            Some(s) => s.points.push(point(r)),
            None => out.push(Series {
                label: k,
                points: vec![point(r)],
            }),
        }
    }
    out
}

/// Render `rd.svg` and `psnr.svg` next to whichever tables the run wrote.
/// The CSVs are only read.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    Manifest::load(run_dir)?;
    let rd = run_dir.join("rd.csv");
    let psnr = run_dir.join("psnr.csv");
    if !rd.is_file() && !psnr.is_file() {
        return Err(Error::Missing {
            dir: run_dir.to_path_buf(),
            files: vec!["rd.csv".into(), "psnr.csv".into()],
        });
    }
    let mut written = Vec::new();
    if rd.is_file() {
        let rows = parse_rd_csv(&fs::read_to_string(&rd)?)?;
        let series = group(&rows, |r| r.method.clone(), |r| (r.latency_ms, r.test_accuracy));
        let path = run_dir.join("rd.svg");
        fs::write(
            &path,
            render_line_chart("Rate vs accuracy", "latency (ms)", "test accuracy", &series),
        )?;
        written.push(path);
    }
    if psnr.is_file() {
        let rows = parse_psnr_csv(&fs::read_to_string(&psnr)?)?;
        let series = group(
            &rows,
            |r| format!("{} k={} @{} dB", r.method, r.latent_dim, r.train_psnr),
            |r| (r.test_psnr, r.test_accuracy),
        );
        let path = run_dir.join("psnr.svg");
        fs::write(
            &path,
            render_line_chart("Accuracy vs test PSNR", "test PSNR (dB)", "test accuracy", &series),
        )?;
        written.push(path);
        let det: Vec<_> = rows.iter().filter(|r| r.auroc.is_some()).collect();
        if !det.is_empty() {
            let series = group(
                &det,
                |r| format!("{} k={} @{} dB", r.method, r.latent_dim, r.train_psnr),
                |r| (r.test_psnr, r.auroc.unwrap_or(f64::NAN)),
            );
            let path = run_dir.join("auroc.svg");
            fs::write(
                &path,
                render_line_chart("Detection vs test PSNR", "test PSNR (dB)", "AUROC", &series),
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_data() {
        let (lo, hi) = axis_range([3.0, -5.0, 25.0].into_iter());
        assert!(lo <= -5.0 && hi >= 25.0);
        let (lo, hi) = axis_range([0.7].into_iter());
        assert!(lo < 0.7 && hi > 0.7);
    }

    #[test]
    fn single_point_one_marker() {
        let svg = render_line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "vife".into(),
                points: vec![(10.0, 0.6)],
            }],
        );
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn tick_values_are_round() {
        assert_eq!(ticks(-6.5, 26.5), vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]);
    }

    #[test]
    fn empty_dir_names_manifest() {
        let dir = tempfile::tempdir().unwrap();
        match emit_plot_data(dir.path()).unwrap_err() {
            Error::Missing { files, .. } => assert_eq!(files, ["manifest.json"]),
            e => panic!("{e}"),
        }
    }
}
