//! Minimal SVG scatter plots.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<Point>,
}

const W: f64 = 360.0;
const H: f64 = 280.0;
const M: f64 = 48.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { (hi - lo) * 0.1 } else { lo.abs().max(1e-3) * 0.1 };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels side by side; every point is one `<circle class="point">`.
pub fn scatter_svg(panels: &[Panel]) -> String {
    let mut s = String::new();
    let total_w = W * panels.len().max(1) as f64;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = W * i as f64;
        let (x0, x1) = range(p.points.iter().map(|q| q.x));
        let (y0, y1) = range(p.points.iter().map(|q| q.y));
        let sx = |x: f64| ox + M + (x - x0) / (x1 - x0) * (W - 1.5 * M);
        let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 1.8 * M);
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            ox + M,
            0.8 * M,
            W - 1.5 * M,
            H - 1.8 * M
        );
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, ox + W / 2.0, escape(&p.title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ox + W / 2.0, H - 10.0, escape(&p.x_label));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
            ox + 14.0,
            H / 2.0,
            ox + 14.0,
            H / 2.0,
            escape(&p.y_label)
        );
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, sx(v), H - M + 14.0);
        }
        for v in [y0, y1] {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, ox + M - 4.0, sy(v) + 4.0);
        }
        for q in &p.points {
            if !(q.x.is_finite() && q.y.is_finite()) {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{} ({:.4}, {:.4})</title></circle>"#,
                sx(q.x),
                sy(q.y),
                escape(&q.label),
                q.x,
                q.y
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, sx(q.x) + 6.0, sy(q.y) - 6.0, escape(&q.label));
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
