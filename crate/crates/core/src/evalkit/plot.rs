//! Two-panel SVG of the cumulative posterior histograms.

use std::fmt::Write;

use super::{Curve, MetricsReport};

const PANEL: f64 = 320.0;
const MARGIN: f64 = 48.0;
const LEGEND_ROW: f64 = 16.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn polyline(curve: &Curve, x0: f64, y0: f64) -> String {
    let mut pts = format!("{x0:.2},{:.2}", y0 + PANEL);
    for (e, v) in curve.edges.iter().zip(&curve.values) {
        let _ = write!(pts, " {:.2},{:.2}", x0 + e * PANEL, y0 + PANEL - v * PANEL);
    }
    pts
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Nucleus and background cumulative histograms side by side, with
/// `1 - AUC` and the harmonic mean in each legend.
pub fn render_svg(report: &MetricsReport) -> String {
    let rows = report.methods.len() as f64;
    let width = 2.0 * PANEL + 3.0 * MARGIN;
    let height = PANEL + 2.0 * MARGIN + rows * LEGEND_ROW + 8.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (panel, title) in ["nucleus posterior on nucleus pixels", "background posterior on background pixels"]
        .iter()
        .enumerate()
    {
        let x0 = MARGIN + panel as f64 * (PANEL + MARGIN);
        let y0 = MARGIN;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{title}</text>"#, x0 + PANEL / 2.0, y0 - 10.0);
        let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#);
        for t in 0..=4 {
            let f = t as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{f:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{f:.2}</text>"#,
                x0 + f * PANEL,
                y0 + PANEL + 14.0,
                x0 - 4.0,
                y0 + PANEL - f * PANEL + 4.0
            );
        }
        for (i, m) in report.methods.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let curve = if panel == 0 { &m.nucleus_curve } else { &m.background_curve };
            let dash = if m.oracle { r#" stroke-dasharray="5,3""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                polyline(curve, x0, y0)
            );
            let inv = if panel == 0 { m.nucleus_inv_auc } else { m.background_inv_auc };
            let ly = y0 + PANEL + 30.0 + i as f64 * LEGEND_ROW;
            let label = format!(
                "{}{}: 1-AUC {inv:.4}, harmonic mean {:.4}",
                escape(&m.name),
                if m.oracle { " (oracle)" } else { "" },
                m.harmonic_mean
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{x0}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{label}</text>"#,
                ly - 4.0,
                x0 + 18.0,
                ly - 4.0,
                x0 + 22.0,
                ly
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
