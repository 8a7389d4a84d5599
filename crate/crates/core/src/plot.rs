//! Minimal SVG scatter plots for the PCA visualizations. No plotting crate:
//! the output is a fixed 800x600 canvas with a categorical palette indexed
//! by class and, optionally, a marker shape cycled per class.

use std::fmt::Write as _;
use std::path::Path;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub fn color_for(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

/// Writes a scatter plot of `coords` with one color per `color_class` value.
/// When `shape_class` is given, the marker shape also cycles with it
/// (circle, square, triangle, diamond); otherwise all points are circles.
pub fn scatter_svg(
    path: &Path,
    coords: &[[f64; 2]],
    color_class: &[usize],
    shape_class: Option<&[usize]>,
    title: &str,
) -> std::io::Result<()> {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        min_x = min_x.min(c[0]);
        max_x = max_x.max(c[0]);
        min_y = min_y.min(c[1]);
        max_y = max_y.max(c[1]);
    }
    if coords.is_empty() || !min_x.is_finite() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let sx = |x: f64| MARGIN + (x - min_x) / span_x * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - min_y) / span_y * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="30" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        svg,
        r##"<rect x="{m}" y="{m}" width="{w}" height="{h}" fill="none" stroke="#cccccc"/>"##,
        m = MARGIN,
        w = WIDTH - 2.0 * MARGIN,
        h = HEIGHT - 2.0 * MARGIN
    )
    .unwrap();

    for (i, c) in coords.iter().enumerate() {
        let (x, y) = (sx(c[0]), sy(c[1]));
        let color = color_for(color_class[i]);
        let shape = shape_class.map_or(0, |s| s[i] % 4);
        match shape {
            0 => writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}" fill-opacity="0.8"/>"#),
            1 => writeln!(svg, r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="{color}" fill-opacity="0.8"/>"#, x - 3.5, y - 3.5),
            2 => writeln!(svg, r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}" fill-opacity="0.8"/>"#, x, y - 4.5, x - 4.0, y + 3.5, x + 4.0, y + 3.5),
            _ => writeln!(svg, r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}" fill-opacity="0.8"/>"#, x, y - 5.0, x + 5.0, y, x, y + 5.0, x - 5.0, y),
        }
        .unwrap();
    }
    writeln!(svg, "</svg>").unwrap();
    std::fs::write(path, svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_wellformed_svg_with_all_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.svg");
        let coords = vec![[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]];
        let colors = vec![0, 1, 2, 3];
        let shapes = vec![0, 1, 2, 3];
        scatter_svg(&path, &coords, &colors, Some(&shapes), "t < 1 & 2").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains(r#"width="800""#) && text.contains(r#"height="600""#));
        assert!(text.contains("&lt; 1 &amp; 2"));
        // one circle, one square, two polygons
        assert_eq!(text.matches("<circle").count(), 1);
        assert_eq!(text.matches("<polygon").count(), 2);
    }

    #[test]
    fn empty_input_still_produces_a_canvas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.svg");
        scatter_svg(&path, &[], &[], None, "empty").unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("</svg>"));
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let coords = vec![[0.1, 0.2], [0.3, 0.4]];
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        scatter_svg(&a, &coords, &[0, 1], None, "x").unwrap();
        scatter_svg(&b, &coords, &[0, 1], None, "x").unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
