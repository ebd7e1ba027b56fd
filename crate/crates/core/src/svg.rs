//! Plain-text SVG writers for line plots and heatmaps.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Polyline plot of named `(x, y)` series.
pub fn line_plot(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="{}" font-size="10">{x0:.3}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#,
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        out,
        r#"<text x="4" y="{}" font-size="10">{y0:.3}</text><text x="4" y="{}" font-size="10">{y1:.3}</text>"#,
        H - PAD,
        PAD + 4.0
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap with one rect per cell; darker is smaller.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>]) -> String {
    let (lo, hi) = bounds(values.iter().flatten().copied());
    let rows = row_labels.len().max(1) as f64;
    let cols = col_labels.len().max(1) as f64;
    let cw = (W - 2.0 * PAD) / cols;
    let ch = (H - 2.0 * PAD) / rows;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 1.0 };
            let shade = (40.0 + 200.0 * t).round() as u8;
            let (x, y) = (PAD + j as f64 * cw, PAD + i as f64 * ch);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="rgb({shade},{shade},255)"/><text x="{:.2}" y="{:.2}" font-size="9" text-anchor="middle">{v:.3}</text>"#,
                x + cw / 2.0,
                y + ch / 2.0 + 3.0
            );
        }
    }
    for (i, l) in row_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            PAD + (i as f64 + 0.5) * ch + 3.0,
            escape(l)
        );
    }
    for (j, l) in col_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            PAD + (j as f64 + 0.5) * cw,
            H - PAD + 14.0,
            escape(l)
        );
    }
    out.push_str("</svg>\n");
    out
}
