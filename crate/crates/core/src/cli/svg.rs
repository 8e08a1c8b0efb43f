//! Static SVG scatter of paired 2-D points.

use std::fmt::Write;

use crate::autodiff::Tensor;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Renders text points as circles, image points as squares, and a segment
/// joining each pair. Both inputs are `N x 2`.
pub fn paired_scatter(title: &str, text: &Tensor, image: &Tensor) -> String {
    let all: Vec<&[f64]> = text.row_iter().chain(image.row_iter()).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span: Vec<f64> = (0..2).map(|k| (hi[k] - lo[k]).max(1e-12)).collect();
    let inner = SIZE - 2.0 * MARGIN;
    let place = |p: &[f64]| -> (f64, f64) {
        if all.is_empty() {
            return (SIZE / 2.0, SIZE / 2.0);
        }
        (
            MARGIN + (p[0] - lo[0]) / span[0] * inner,
            SIZE - MARGIN - (p[1] - lo[1]) / span[1] * inner,
        )
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        MARGIN / 2.0 + 5.0,
        escape(title)
    );
    let _ = writeln!(s, r##"<g stroke="#999999" stroke-width="0.5">"##);
    for (t, v) in text.row_iter().zip(image.row_iter()) {
        let (x1, y1) = place(t);
        let (x2, y2) = place(v);
        let _ = writeln!(s, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g fill="#d62728">"##);
    for t in text.row_iter() {
        let (x, y) = place(t);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5"/>"#);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g fill="#1f77b4">"##);
    for v in image.row_iter() {
        let (x, y) = place(v);
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="5" height="5"/>"#, x - 2.5, y - 2.5);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<circle cx="{}" cy="{}" r="4" fill="#d62728"/><text x="{}" y="{}" font-size="12">text</text>"##,
        MARGIN + 10.0,
        SIZE - 14.0,
        MARGIN + 20.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="8" height="8" fill="#1f77b4"/><text x="{}" y="{}" font-size="12">image</text>"##,
        MARGIN + 86.0,
        SIZE - 18.0,
        MARGIN + 100.0,
        SIZE - 10.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
