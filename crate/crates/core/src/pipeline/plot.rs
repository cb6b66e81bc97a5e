//! Quantile ellipses and minimal SVG figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MmoError, Result};
use crate::simulate::Sample2D;

/// Probability-mass ellipse of a bivariate Gaussian, in (F1, F2) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Major then minor semi-axis.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the F1 axis towards F2, in radians.
    pub angle: f64,
    pub quantile: f64,
}

impl Ellipse {
    /// `n` points around the boundary.
    pub fn outline(&self, n: usize) -> Vec<[f64; 2]> {
        let (s, c) = self.angle.sin_cos();
        (0..n)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / n as f64;
                let (a, b) = (self.semi_axes[0] * phi.cos(), self.semi_axes[1] * phi.sin());
                [self.center[0] + a * c - b * s, self.center[1] + a * s + b * c]
            })
            .collect()
    }
}

/// Ellipse of the Gaussian fitted to `sample` holding `quantile` of its mass.
pub fn emit_ellipse(sample: &Sample2D, quantile: f64) -> Result<Ellipse> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(MmoError::Config(format!("ellipse quantile {quantile} outside (0, 1)")));
    }
    if sample.len() < 3 {
        return Err(MmoError::DegenerateSample(format!("{} points, need at least 3", sample.len())));
    }
    let s = sample.cov();
    let (a, b, d) = (s[0][0], s[0][1], s[1][1]);
    let half_trace = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (half_trace + disc, half_trace - disc);
    if !(l2 > 1e-12 * l1.max(f64::MIN_POSITIVE)) {
        return Err(MmoError::DegenerateSample("singular covariance".into()));
    }
    let chi2 = -2.0 * (1.0 - quantile).ln();
    Ok(Ellipse {
        center: sample.mean(),
        semi_axes: [(l1 * chi2).sqrt(), (l2 * chi2).sqrt()],
        angle: 0.5 * (2.0 * b).atan2(a - d),
        quantile,
    })
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 4] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];

struct Frame {
    x: [f64; 2],
    y: [f64; 2],
    flip_x: bool,
    flip_y: bool,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let span = SIZE - 2.0 * MARGIN;
        let mut u = (x - self.x[0]) / (self.x[1] - self.x[0]);
        let mut v = (y - self.y[0]) / (self.y[1] - self.y[0]);
        if self.flip_x {
            u = 1.0 - u;
        }
        if !self.flip_y {
            v = 1.0 - v;
        }
        (MARGIN + u * span, MARGIN + v * span)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{mid}\" y=\"25\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <text x=\"{mid}\" y=\"{xl}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n\
         <text x=\"15\" y=\"{mid}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 15 {mid})\">{y_label}</text>\n",
        w = SIZE - 2.0 * MARGIN,
        mid = SIZE / 2.0,
        xl = SIZE - 15.0,
    );
}

fn padded(lo: f64, hi: f64) -> [f64; 2] {
    let pad = 0.05 * (hi - lo).max(1e-9);
    [lo - pad, hi + pad]
}

/// Labelled ellipses on a vowel chart: F2 decreasing to the right, F1 downwards.
pub fn ellipse_svg(title: &str, items: &[(String, Ellipse)]) -> String {
    let outlines: Vec<Vec<[f64; 2]>> = items.iter().map(|(_, e)| e.outline(72)).collect();
    let all = outlines.iter().flatten();
    let (mut f1, mut f2) = ([f64::INFINITY, f64::NEG_INFINITY], [f64::INFINITY, f64::NEG_INFINITY]);
    for p in all {
        f1 = [f1[0].min(p[0]), f1[1].max(p[0])];
        f2 = [f2[0].min(p[1]), f2[1].max(p[1])];
    }
    let frame = Frame {
        x: padded(f2[0], f2[1]),
        y: padded(f1[0], f1[1]),
        flip_x: true,
        flip_y: true,
    };
    let mut out = String::new();
    header(&mut out, title, "F2 (normalized)", "F1 (normalized)");
    for (k, ((label, e), line)) in items.iter().zip(&outlines).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = line
            .iter()
            .map(|p| {
                let (x, y) = frame.px(p[1], p[0]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, "<polygon points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
        let (x, y) = frame.px(e.center[1], e.center[0]);
        let _ = writeln!(out, "<text x=\"{x:.2}\" y=\"{y:.2}\" fill=\"{color}\" font-size=\"12\" text-anchor=\"middle\">{label}</text>");
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of (x, y) pairs with the y = x reference line.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    let hi = points.iter().flat_map(|p| [p.1, p.2]).fold(1.0f64, f64::max);
    let lo = points.iter().flat_map(|p| [p.1, p.2]).fold(0.0f64, f64::min);
    let frame = Frame {
        x: [lo, hi],
        y: [lo, hi],
        flip_x: false,
        flip_y: false,
    };
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    let (x0, y0) = frame.px(lo, lo);
    let (x1, y1) = frame.px(hi, hi);
    let _ = writeln!(out, "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>");
    for (label, x, y) in points {
        let (px, py) = frame.px(*x, *y);
        let _ = writeln!(out, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{}\"><title>{label}</title></circle>", PALETTE[0]);
    }
    out.push_str("</svg>\n");
    out
}
