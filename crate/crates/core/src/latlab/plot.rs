use std::fmt::Write as _;

use super::hysteresis::HysteresisMap;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG line chart of median latency against dimension, with
/// LHPs marked.
pub fn render_svg(map: &HysteresisMap, title: &str) -> String {
    let (x0, x1) = (map.grid[0] as f64, *map.grid.last().unwrap() as f64);
    let lo = map.latency_ns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.latency_ns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span_x = if x1 > x0 { x1 - x0 } else { 1.0 };
    let span_y = if hi > lo { hi - lo } else { 1.0 };
    let px = |d: usize| MARGIN + (d as f64 - x0) / span_x * (WIDTH - 2.0 * MARGIN);
    let py = |l: f64| HEIGHT - MARGIN - (l - lo) / span_y * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{left:.1} {top:.1} V{bottom:.1} H{right:.1}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">dimension</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">median latency (ns)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (x, label) in [(left, map.grid[0]), (right, *map.grid.last().unwrap())] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#, bottom + 16.0);
    }
    for (y, v) in [(bottom, lo), (top, hi)] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.0}</text>"#, left - 4.0);
    }
    let points: Vec<String> = map
        .grid
        .iter()
        .zip(&map.latency_ns)
        .map(|(&d, &l)| format!("{:.2},{:.2}", px(d), py(l)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#,
        points.join(" ")
    );
    for &d in &map.lhps {
        let l = map.latency_at(d).expect("lhp on grid");
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="crimson"><title>LHP {d}: {l} ns</title></circle>"#,
            px(d),
            py(l)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{} LHPs / {} points, redundancy {:.1}%</text>"#,
        right,
        top - 8.0,
        map.lhps.len(),
        map.grid.len(),
        map.redundancy * 100.0
    );
    out.push_str("</svg>\n");
    out
}
