//! Minimal SVG scatter output for sampled points.

use crate::concepts::{classify, ConceptRegistry};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const SIZE: f64 = 640.0;
const RANGE: f64 = 7.5; // data window [-RANGE, RANGE] in both axes

fn to_px(v: f64) -> f64 {
    (v + RANGE) / (2.0 * RANGE) * SIZE
}

/// Scatter of samples colored by Bayes classification, with registry
/// component means drawn as crosses.
pub fn scatter_svg(reg: &ConceptRegistry, rows: &[Vec<f64>], title: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    ));
    s.push_str(&format!(
        "  <rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        xml_escape(title)
    ));
    for row in rows {
        let cls = classify(reg, row);
        let color = PALETTE[cls % PALETTE.len()];
        s.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.6\"/>\n",
            to_px(row[0]),
            to_px(-row[1]),
            color
        ));
    }
    for sub in &reg.subconcepts {
        let (x, y) = (to_px(sub.mean[0]), to_px(-sub.mean[1]));
        let color = PALETTE[sub.id % PALETTE.len()];
        s.push_str(&format!(
            "  <path d=\"M {x0:.2} {y0:.2} L {x1:.2} {y1:.2} M {x0:.2} {y1:.2} L {x1:.2} {y0:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            x0 = x - 6.0,
            y0 = y - 6.0,
            x1 = x + 6.0,
            y1 = y + 6.0,
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            x + 8.0,
            y - 8.0,
            xml_escape(&sub.name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
