//! Loss curves as standalone SVG line plots.

use std::fmt::Write as _;

use crate::trainer::TrainLog;

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const MARGIN: f64 = 48.0;

/// Train and val `loss` against epoch, linear axes, one polyline per split.
pub fn loss_curve_svg(log: &TrainLog, title: &str, width: u32, height: u32) -> String {
    let series: Vec<(&str, Vec<(usize, f64)>)> = ["train", "val"]
        .into_iter()
        .map(|s| (s, log.series(s, "loss").into_iter().filter(|p| p.1.is_finite()).collect::<Vec<_>>()))
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    let (w, h) = (width as f64, height as f64);
    let all = series.iter().flat_map(|s| s.1.iter());
    let (mut x1, mut y0, mut y1) = (1usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(e, v) in all {
        x1 = x1.max(e);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |e: usize| MARGIN + (e as f64 - 1.0) / ((x1 - 1).max(1) as f64) * (w - 2.0 * MARGIN);
    let py = |v: f64| h - MARGIN - (v - y0) / (y1 - y0) * (h - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = h - MARGIN,
        r = w - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.4}</text>"#, MARGIN - 4.0, MARGIN + 4.0, y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.4}</text>"#, MARGIN - 4.0, h - MARGIN, y0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">epoch {x1}</text>"#, w - MARGIN, h - MARGIN + 16.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.1},{:.1}", px(e), py(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>"#, w - MARGIN - 40.0, MARGIN + 14.0 * (i as f64 + 1.0));
    }
    if log.best_epoch > 0 {
        let x = px(log.best_epoch);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#, MARGIN, h - MARGIN);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
