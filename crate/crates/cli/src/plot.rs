//! PSNR against inference-time scatter, written as SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ldp_core::train_eval::MetricsReport;
use ldp_core::{LdpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub seconds: f64,
    pub psnr: f64,
    pub label: String,
    pub hardware: Option<String>,
}

fn point_of(path: &Path) -> std::result::Result<Point, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let m: MetricsReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let seconds = m.seconds_per_image.ok_or("no seconds_per_image")?;
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(format!("bad seconds_per_image {seconds}"));
    }
    if !m.psnr.is_finite() {
        return Err(format!("psnr {} cannot be placed on an axis", m.psnr));
    }
    let label = m
        .label
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    Ok(Point {
        seconds,
        psnr: m.psnr,
        label,
        hardware: m.hardware,
    })
}

pub fn plot_files(files: &[PathBuf], out: &Path) -> Result<()> {
    if files.is_empty() {
        return Err(LdpError::config("metrics", "at least one metrics file is required"));
    }
    let mut points = Vec::new();
    for f in files {
        match point_of(f) {
            Ok(p) => points.push(p),
            Err(e) => eprintln!("ldp plot: skipping {}: {e}", f.display()),
        }
    }
    if points.is_empty() {
        return Err(LdpError::Data("no usable metrics files".into()));
    }
    std::fs::write(out, render_svg(&points)).map_err(|e| LdpError::io(out, e))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 80.0;

/// Round step (1, 2 or 5 times a power of ten) giving about `n` ticks.
fn tick_step(span: f64, n: f64) -> f64 {
    let raw = span / n;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    mag * if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    }
}

fn padded(lo: f64, hi: f64, min_span: f64) -> (f64, f64) {
    let span = (hi - lo).max(min_span);
    let mid = (hi + lo) / 2.0;
    (mid - 0.6 * span, mid + 0.6 * span)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64, step: f64) -> String {
    let digits = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.digits$}")
}

/// Points are drawn in order of measured time; the x axis is milliseconds.
pub fn render_svg(points: &[Point]) -> String {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.seconds.total_cmp(&b.seconds));
    let ms: Vec<f64> = pts.iter().map(|p| p.seconds * 1e3).collect();
    let fold = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x0, x1) = fold(&ms);
    let (y0, y1) = fold(&pts.iter().map(|p| p.psnr).collect::<Vec<_>>());
    let (x0, x1) = padded(x0, x1, x1.abs().max(1e-3) * 0.5);
    let (x0, x1) = (x0.max(0.0), x1);
    let (y0, y1) = padded(y0, y1, 1.0);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| TOP + (y1 - v) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">PSNR and inference time</text>"#,
        WIDTH / 2.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );

    let step = tick_step(x1 - x0, 6.0);
    let mut t = (x0 / step).ceil() * step;
    while t <= x1 + 1e-9 * step {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 19.0,
            fmt_tick(t, step)
        );
        t += step;
    }
    let step = tick_step(y1 - y0, 6.0);
    let mut t = (y0 / step).ceil() * step;
    while t <= y1 + 1e-9 * step {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            fmt_tick(t, step)
        );
        t += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">inference time per image (ms)</text>"#,
        LEFT + pw / 2.0,
        TOP + ph + 38.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">PSNR (dB)</text>"#,
        TOP + ph / 2.0
    );

    for (p, &t) in pts.iter().zip(&ms) {
        let (x, y) = (sx(t), sy(p.psnr));
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{x:.2}" cy="{y:.2}" r="5" fill="#1f77b4"><title>{:.3} ms, {:.3} dB</title></circle>"##,
            t, p.psnr
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 8.0,
            y - 6.0,
            escape(&p.label)
        );
    }

    let mut hw: Vec<&str> = pts.iter().filter_map(|p| p.hardware.as_deref()).collect();
    hw.sort_unstable();
    hw.dedup();
    let hw = if hw.is_empty() { "unrecorded".to_string() } else { hw.join("; ") };
    let _ = writeln!(
        s,
        r##"<text x="{LEFT}" y="{:.1}" font-size="10" fill="#555">hardware: {}; median of warm runs, batch 1</text>"##,
        HEIGHT - 12.0,
        escape(&hw)
    );
    s.push_str("</svg>\n");
    s
}
