//! Deterministic SVG rendering of curves, heatmaps and loss traces.
//!
//! Heatmaps use a linear two-colour ramp from `#2166ac` (minimum) to
//! `#b2182b` (maximum), interpolated per RGB channel and rounded to the
//! nearest integer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

pub const RAMP_LOW: [u8; 3] = [0x21, 0x66, 0xac];
pub const RAMP_HIGH: [u8; 3] = [0xb2, 0x18, 0x2b];

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Curve,
    Heatmap,
    LossTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub output: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("plot output {0} must end in .svg")]
    Extension(PathBuf),
    #[error("plot data is empty or malformed: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PlotSpec {
    pub fn new(kind: PlotKind, title: &str, x_label: &str, y_label: &str, output: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            output: output.into(),
        }
    }

    fn check(&self) -> Result<(), PlotError> {
        if self.output.extension().and_then(|e| e.to_str()) != Some("svg") {
            return Err(PlotError::Extension(self.output.clone()));
        }
        Ok(())
    }
}

/// Maps `t ∈ [0, 1]` onto the heatmap ramp.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let mut out = [0u8; 3];
    for c in 0..3 {
        let lo = f64::from(RAMP_LOW[c]);
        let hi = f64::from(RAMP_HIGH[c]);
        out[c] = (lo + t * (hi - lo)).round() as u8;
    }
    out
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn header(out: &mut String, spec: &PlotSpec) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(&spec.title)
    );
}

fn axes(out: &mut String, spec: &PlotSpec, frame: &Frame, y_tick: impl Fn(f64) -> String) {
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let f = f64::from(t) / 4.0;
        let xv = frame.x.0 + f * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + f * (frame.y.1 - frame.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.3}</text>"#,
            frame.px(xv),
            y0 + 16.0,
            xv
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            frame.py(yv) + 4.0,
            y_tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&spec.y_label)
    );
}

fn polyline(out: &mut String, frame: &Frame, xs: &[f64], ys: &[f64], colour: &str) {
    let mut points = String::new();
    for (x, y) in xs.iter().zip(ys) {
        let _ = write!(points, "{:.2},{:.2} ", frame.px(*x), frame.py(*y));
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
        points.trim_end()
    );
}

pub fn render_curve(spec: &PlotSpec, xs: &[f64], ys: &[f64]) -> Result<String, PlotError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(PlotError::Data("curve needs equal, non-empty x and y".into()));
    }
    let frame = Frame {
        x: bounds(xs.iter()),
        y: bounds(ys.iter()),
    };
    let mut out = String::new();
    header(&mut out, spec);
    axes(&mut out, spec, &frame, |v| format!("{v:.3}"));
    polyline(&mut out, &frame, xs, ys, PALETTE[0]);
    out.push_str("</svg>\n");
    Ok(out)
}

/// `values[a][b]` is drawn at column `a` (x = `grid_a`) and row `b` (y = `grid_b`).
pub fn render_heatmap(spec: &PlotSpec, grid_a: &[f64], grid_b: &[f64], values: &[Vec<f64>]) -> Result<String, PlotError> {
    if grid_a.len() < 2 || grid_b.len() < 2 || values.len() != grid_a.len() || values.iter().any(|r| r.len() != grid_b.len()) {
        return Err(PlotError::Data("heatmap grids and values disagree".into()));
    }
    let frame = Frame {
        x: bounds(grid_a.iter()),
        y: bounds(grid_b.iter()),
    };
    let (lo, hi) = bounds(values.iter().flatten());
    let cw = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / grid_a.len() as f64;
    let ch = (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / grid_b.len() as f64;
    let mut out = String::new();
    header(&mut out, spec);
    for (a, row) in values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let [r, g, bl] = ramp((v - lo) / (hi - lo));
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{r:02x}{g:02x}{bl:02x}"/>"##,
                MARGIN_LEFT + a as f64 * cw,
                HEIGHT - MARGIN_BOTTOM - (b + 1) as f64 * ch,
                cw + 0.01,
                ch + 0.01
            );
        }
    }
    axes(&mut out, spec, &frame, |v| format!("{v:.3}"));
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">min {lo:.4} / max {hi:.4}</text>"#,
        WIDTH - MARGIN_RIGHT,
        MARGIN_TOP - 4.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Overlay of several traces on a log10 axis.
pub fn render_traces(spec: &PlotSpec, series: &[(String, Vec<f64>)]) -> Result<String, PlotError> {
    if series.is_empty() || series.iter().any(|(_, s)| s.is_empty()) {
        return Err(PlotError::Data("loss overlay needs at least one non-empty series".into()));
    }
    let logged: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, s)| s.iter().map(|v| v.max(1e-300).log10()).collect())
        .collect();
    let longest = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1);
    let frame = Frame {
        x: (0.0, (longest.max(2) - 1) as f64),
        y: bounds(logged.iter().flatten()),
    };
    let mut out = String::new();
    header(&mut out, spec);
    axes(&mut out, spec, &frame, |v| format!("1e{v:.1}"));
    for (t, ((name, _), ys)) in series.iter().zip(&logged).enumerate() {
        let colour = PALETTE[t % PALETTE.len()];
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        polyline(&mut out, &frame, &xs, ys, colour);
        let ly = MARGIN_TOP + 14.0 + 16.0 * t as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{colour}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN_RIGHT - 6.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_svg(spec: &PlotSpec, svg: &str) -> Result<(), PlotError> {
    spec.check()?;
    write_to(&spec.output, svg)
}

fn write_to(path: &Path, svg: &str) -> Result<(), PlotError> {
    Ok(io::write_atomic(path, svg.as_bytes())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), RAMP_LOW);
        assert_eq!(ramp(1.0), RAMP_HIGH);
        assert_eq!(ramp(0.5), [0x6a, 0x3f, 0x6c]);
    }

    #[test]
    fn output_must_be_svg() {
        let spec = PlotSpec::new(PlotKind::Curve, "t", "x", "y", "out.png");
        assert!(matches!(write_svg(&spec, ""), Err(PlotError::Extension(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = PlotSpec::new(PlotKind::Heatmap, "a < b", "x", "y", "h.svg");
        let g = [0.0, 0.5, 1.0];
        let v = vec![vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]];
        let a = render_heatmap(&spec, &g, &g, &v).unwrap();
        assert_eq!(a, render_heatmap(&spec, &g, &g, &v).unwrap());
        assert_eq!(a.matches("<rect").count(), 10);
        assert!(a.contains("a &lt; b"));
        let c = render_curve(&spec, &g, &[1.0, 1.0, 1.0]).unwrap();
        assert!(c.contains("<polyline"));
        let t = render_traces(&spec, &[("one".into(), vec![1.0, 0.1]), ("two".into(), vec![2.0, 0.5, 0.01])]).unwrap();
        assert_eq!(t.matches("<polyline").count(), 2);
    }
}
