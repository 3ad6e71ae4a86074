//! Standalone SVG scatter plots of 2-D embeddings.

use std::fmt::Write as _;

use crate::labelkit::SoftLabel;

/// Per-class anchor colors, in class order: dark for circles, light for ellipses.
pub const CLASS_ANCHORS: [[u8; 3]; 6] = [
    [214, 39, 40],   // red circle
    [255, 152, 150], // red ellipse
    [44, 160, 44],   // green circle
    [152, 223, 138], // green ellipse
    [31, 119, 180],  // blue circle
    [174, 199, 232], // blue ellipse
];

/// Soft-label-weighted blend of the class anchors.
pub fn blend_color(label: &SoftLabel) -> [u8; 3] {
    let mut acc = [0.0f64; 3];
    for (p, anchor) in label.probs().iter().zip(CLASS_ANCHORS.iter().cycle()) {
        for ch in 0..3 {
            acc[ch] += p * anchor[ch] as f64;
        }
    }
    acc.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

pub fn hex_color(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

const SIZE: f64 = 800.0;
const MARGIN: f64 = 20.0;

/// Renders points colored by their label blend on a black canvas.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[SoftLabel], title: &str) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="black"/>"#);
    for (p, l) in points.iter().zip(labels) {
        let cx = MARGIN + (p[0] - x0) * scale;
        let cy = SIZE - MARGIN - (p[1] - y0) * scale;
        let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}"/>"#, hex_color(blend_color(l)));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
