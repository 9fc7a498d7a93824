//! Static SVG figures: checkerboard scatter plots and ablation line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::problems::{Checkerboard, BOARD_CELLS, BOARD_HALF_WIDTH};

/// Scatter plots cover `[-VIEW, VIEW]^2`.
pub const VIEW: f64 = 3.0;

/// One color per filled checkerboard cell, in `Checkerboard::filled_cells` order.
pub const CELL_COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
pub const OFF_SUPPORT: &str = "#c8c8c8";
const PLAIN: &str = "#1f77b4";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coloring {
    /// Color by checkerboard cell; grey off the support.
    CellParity,
    Plain,
}

/// Dashed line marking an observed coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObservationLine {
    /// `x1 = value`.
    Vertical(f64),
    /// `x2 = value`.
    Horizontal(f64),
}

fn header(out: &mut String, min_x: f64, min_y: f64, w: f64, h: f64) {
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"{:.0}\" viewBox=\"{min_x} {min_y} {w} {h}\">",
        480.0 * h / w
    );
}

/// Color of a point under `coloring`.
pub fn point_color(x: f64, y: f64, coloring: Coloring) -> &'static str {
    match coloring {
        Coloring::Plain => PLAIN,
        Coloring::CellParity => match Checkerboard::cell_of(&[x, y]) {
            Some((i, j)) if Checkerboard::is_filled(i, j) => {
                let k = Checkerboard::filled_cells()
                    .iter()
                    .position(|&c| c == (i, j))
                    .expect("filled cell is listed");
                CELL_COLORS[k]
            }
            _ => OFF_SUPPORT,
        },
    }
}

/// Renders a 2D scatter plot as an SVG document.
pub fn scatter_svg(points: &Tensor, coloring: Coloring, overlay: Option<ObservationLine>, title: &str) -> Result<String> {
    if points.ncols() != 2 && points.nrows() > 0 {
        return Err(Error::invalid(format!("scatter plots need 2D points, got {}", points.ncols())));
    }
    let mut s = String::new();
    header(&mut s, -VIEW, -VIEW, 2.0 * VIEW, 2.0 * VIEW);
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"white\"/>", -VIEW, -VIEW, 2.0 * VIEW, 2.0 * VIEW);
    // Flip so that x2 points up.
    s.push_str("<g transform=\"scale(1,-1)\">\n");
    let _ = writeln!(
        s,
        "<g stroke=\"#999999\" stroke-width=\"0.01\"><line x1=\"{a}\" y1=\"0\" x2=\"{b}\" y2=\"0\"/><line x1=\"0\" y1=\"{a}\" x2=\"0\" y2=\"{b}\"/></g>",
        a = -VIEW,
        b = VIEW
    );
    let w = 2.0 * BOARD_HALF_WIDTH;
    let _ = writeln!(
        s,
        "<rect x=\"{0}\" y=\"{0}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#dddddd\" stroke-width=\"0.01\"/>",
        -BOARD_HALF_WIDTH
    );
    let cell = w / BOARD_CELLS as f64;
    for k in 1..BOARD_CELLS {
        let v = -BOARD_HALF_WIDTH + k as f64 * cell;
        let _ = writeln!(
            s,
            "<g stroke=\"#eeeeee\" stroke-width=\"0.005\"><line x1=\"{v}\" y1=\"{a}\" x2=\"{v}\" y2=\"{b}\"/><line x1=\"{a}\" y1=\"{v}\" x2=\"{b}\" y2=\"{v}\"/></g>",
            a = -BOARD_HALF_WIDTH,
            b = BOARD_HALF_WIDTH
        );
    }
    s.push_str("<g stroke=\"none\" fill-opacity=\"0.6\">\n");
    for row in points.rows() {
        let (x, y) = (row[0], row[1]);
        if !(x.is_finite() && y.is_finite()) || x.abs() > VIEW || y.abs() > VIEW {
            continue;
        }
        let _ = writeln!(s, "<circle cx=\"{x:.4}\" cy=\"{y:.4}\" r=\"0.02\" fill=\"{}\"/>", point_color(x, y, coloring));
    }
    s.push_str("</g>\n");
    if let Some(line) = overlay {
        let (x1, y1, x2, y2) = match line {
            ObservationLine::Vertical(v) => (v, -VIEW, v, VIEW),
            ObservationLine::Horizontal(v) => (-VIEW, v, VIEW, v),
        };
        let _ = writeln!(
            s,
            "<line x1=\"{x1:.4}\" y1=\"{y1:.4}\" x2=\"{x2:.4}\" y2=\"{y2:.4}\" stroke=\"black\" stroke-width=\"0.02\" stroke-dasharray=\"0.1,0.06\"/>"
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn plot_scatter(
    points: &Tensor,
    coloring: Coloring,
    overlay: Option<ObservationLine>,
    title: &str,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, scatter_svg(points, coloring, overlay, title)?)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A named polyline for [`lines_svg`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Line plot with an optional log10 x axis. Non-finite points are skipped.
pub fn lines_svg(series: &[Series], log_x: bool, title: &str, y_label: &str) -> Result<String> {
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| tx(*x).is_finite() && y.is_finite())
        .map(|(x, y)| (tx(x), y))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !finite.is_empty() {
        x0 = finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    // Plot area is [0, 100] x [0, 60] in user units.
    let px = |x: f64| 100.0 * (x - x0) / (x1 - x0);
    let py = |y: f64| 60.0 - 60.0 * (y - y0) / (y1 - y0);
    let mut s = String::new();
    header(&mut s, -15.0, -8.0, 150.0, 80.0);
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    s.push_str("<rect x=\"-15\" y=\"-8\" width=\"150\" height=\"80\" fill=\"white\"/>\n");
    s.push_str("<rect x=\"0\" y=\"0\" width=\"100\" height=\"60\" fill=\"none\" stroke=\"black\" stroke-width=\"0.2\"/>\n");
    let _ = writeln!(s, "<text x=\"50\" y=\"-3\" font-size=\"3\" text-anchor=\"middle\">{}</text>", escape(title));
    let _ = writeln!(s, "<text x=\"-12\" y=\"30\" font-size=\"2.5\">{}</text>", escape(y_label));
    let fmt_x = |v: f64| if log_x { format!("{:.3}", 10f64.powf(v)) } else { format!("{v:.3}") };
    let _ = writeln!(s, "<text x=\"0\" y=\"64\" font-size=\"2.5\">{}</text>", fmt_x(x0));
    let _ = writeln!(s, "<text x=\"100\" y=\"64\" font-size=\"2.5\" text-anchor=\"end\">{}</text>", fmt_x(x1));
    let _ = writeln!(s, "<text x=\"-1\" y=\"60\" font-size=\"2.5\" text-anchor=\"end\">{y0:.4}</text>");
    let _ = writeln!(s, "<text x=\"-1\" y=\"2\" font-size=\"2.5\" text-anchor=\"end\">{y1:.4}</text>");
    for (k, ser) in series.iter().enumerate() {
        let color = CELL_COLORS[k % CELL_COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| tx(*x).is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.3},{:.3}", px(tx(x)), py(y)))
            .collect();
        let dash = if ser.dashed { " stroke-dasharray=\"1.5,1\"" } else { "" };
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.4\"{dash}/>",
            pts.join(" ")
        );
        let ly = 4.0 + 4.0 * k as f64;
        let _ = writeln!(
            s,
            "<text x=\"102\" y=\"{ly}\" font-size=\"2.5\" fill=\"{color}\">{}</text>",
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn colors() {
        assert_eq!(point_color(10.0, 10.0, Coloring::CellParity), OFF_SUPPORT);
        let filled = Checkerboard::filled_cells();
        let mut seen: Vec<&str> = filled
            .iter()
            .map(|&(i, j)| {
                let c = Checkerboard::cell_center(i, j);
                point_color(c[0], c[1], Coloring::CellParity)
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn empty_and_wrong_dim() {
        let s = scatter_svg(&Array2::zeros((0, 2)), Coloring::Plain, None, "empty").unwrap();
        assert!(s.contains("<line") && !s.contains("<circle"));
        assert!(scatter_svg(&arr2(&[[0.0, 1.0, 2.0]]), Coloring::Plain, None, "x").is_err());
    }

    #[test]
    fn overlay_is_dashed() {
        let s = scatter_svg(&arr2(&[[0.5, 0.5]]), Coloring::CellParity, Some(ObservationLine::Vertical(0.5)), "y").unwrap();
        assert!(s.contains("stroke-dasharray"));
    }
}
