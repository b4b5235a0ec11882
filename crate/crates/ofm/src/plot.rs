//! Dependency-free SVG emission for 2D scatter, trajectory, and
//! loss-curve plots. Output is plain text and deterministic, so plots
//! diff cleanly in tests.

use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 640.0;
const MARGIN: f64 = 48.0;

pub struct ScatterLayer<'a> {
    pub id: &'a str,
    pub points: &'a DMatrix<f64>,
    pub color: &'a str,
    pub radius: f64,
    pub opacity: f64,
}

/// Polyline trajectories in data coordinates.
pub struct TrajectoryLayer<'a> {
    pub id: &'a str,
    pub paths: &'a [Vec<DVector<f64>>],
    pub color: &'a str,
    pub opacity: f64,
}

struct Frame {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Frame {
    fn from_data<'a>(layers: impl Iterator<Item = (f64, f64)> + 'a) -> Frame {
        let mut f =
            Frame { min_x: f64::MAX, max_x: f64::MIN, min_y: f64::MAX, max_y: f64::MIN };
        for (x, y) in layers {
            f.min_x = f.min_x.min(x);
            f.max_x = f.max_x.max(x);
            f.min_y = f.min_y.min(y);
            f.max_y = f.max_y.max(y);
        }
        if f.min_x >= f.max_x {
            f.min_x -= 1.0;
            f.max_x += 1.0;
        }
        if f.min_y >= f.max_y {
            f.min_y -= 1.0;
            f.max_y += 1.0;
        }
        let pad_x = 0.05 * (f.max_x - f.min_x);
        let pad_y = 0.05 * (f.max_y - f.min_y);
        f.min_x -= pad_x;
        f.max_x += pad_x;
        f.min_y -= pad_y;
        f.max_y += pad_y;
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.min_x) / (self.max_x - self.min_x) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        // SVG y grows downward.
        H - MARGIN - (y - self.min_y) / (self.max_y - self.min_y) * (H - 2.0 * MARGIN)
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    )
}

/// 2D plot of point layers plus optional trajectory polylines.
pub fn scatter_svg(
    title: &str,
    layers: &[ScatterLayer<'_>],
    trajectories: &[TrajectoryLayer<'_>],
) -> String {
    let pts = layers
        .iter()
        .flat_map(|l| (0..l.points.nrows()).map(move |i| (l.points[(i, 0)], l.points[(i, 1)])))
        .chain(
            trajectories
                .iter()
                .flat_map(|t| t.paths.iter().flat_map(|p| p.iter().map(|z| (z[0], z[1])))),
        );
    let frame = Frame::from_data(pts);

    let mut out = svg_header(title);
    for traj in trajectories {
        let _ = writeln!(
            out,
            "<g id=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" opacity=\"{}\">",
            traj.id, traj.color, traj.opacity
        );
        for path in traj.paths {
            let coords: Vec<String> = path
                .iter()
                .map(|z| format!("{:.2},{:.2}", frame.px(z[0]), frame.py(z[1])))
                .collect();
            let _ = writeln!(out, "<polyline points=\"{}\"/>", coords.join(" "));
        }
        let _ = writeln!(out, "</g>");
    }
    for layer in layers {
        let _ = writeln!(
            out,
            "<g id=\"{}\" fill=\"{}\" opacity=\"{}\">",
            layer.id, layer.color, layer.opacity
        );
        for i in 0..layer.points.nrows() {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{}\"/>",
                frame.px(layer.points[(i, 0)]),
                frame.py(layer.points[(i, 1)]),
                layer.radius
            );
        }
        let _ = writeln!(out, "</g>");
    }
    // Legend: one text label per layer.
    let mut y = 40.0;
    for layer in layers.iter().map(|l| (l.id, l.color)).chain(trajectories.iter().map(|t| (t.id, t.color))) {
        let _ = writeln!(
            out,
            "<text x=\"{:.0}\" y=\"{y:.0}\" font-family=\"monospace\" font-size=\"12\" fill=\"{}\">{}</text>",
            W - MARGIN - 120.0,
            layer.1,
            layer.0
        );
        y += 16.0;
    }
    out.push_str("</svg>\n");
    out
}

pub struct LossSeries<'a> {
    pub method: &'a str,
    pub points: Vec<(f64, f64)>,
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Loss curves over iterations; one marker per trace row.
pub fn loss_svg(title: &str, series: &[LossSeries<'_>]) -> String {
    let frame = Frame::from_data(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = svg_header(title);
    // Axes.
    let _ = writeln!(
        out,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    for k in 0..=4 {
        let fx = frame.min_x + (frame.max_x - frame.min_x) * k as f64 / 4.0;
        let fy = frame.min_y + (frame.max_y - frame.min_y) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{:.0}</text>",
            frame.px(fx),
            H - MARGIN + 16.0,
            fx
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>",
            MARGIN - 6.0,
            frame.py(fy) + 3.0,
            fy
        );
    }
    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let coords: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y))).collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        for (x, y) in &s.points {
            let _ = writeln!(
                out,
                "<circle class=\"pt\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>",
                frame.px(*x),
                frame.py(*y)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{}</text>",
            W - MARGIN - 80.0,
            40.0 + 16.0 * si as f64,
            s.method
        );
    }
    out.push_str("</svg>\n");
    out
}
