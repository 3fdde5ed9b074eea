//! Self-contained SVG line charts drawn from a CSV [`Table`].

use std::fmt::Write;

use crate::table::Table;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Data range of the finite values, padded so flat series still get height.
fn range<'a>(values: impl Iterator<Item = &'a f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if lo > hi {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1.0) * 0.05 };
    Some((lo - pad, hi + pad))
}

/// Renders `series` against `t`. Non-finite samples break the line.
pub fn line_chart(title: &str, t: &[f64], series: &[(&str, &[f64])]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));

    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = writeln!(svg, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);

    let tr = range(t.iter());
    let yr = range(series.iter().flat_map(|(_, s)| s.iter()));
    let (Some((t0, t1)), Some((y0, y1))) = (tr, yr) else {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">no finite data</text>"#, LEFT + pw / 2.0, TOP + ph / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    };
    let sx = |v: f64| LEFT + (v - t0) / (t1 - t0) * pw;
    let sy = |v: f64| TOP + (y1 - v) / (y1 - y0) * ph;

    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (tv, yv) = (t0 + f * (t1 - t0), y0 + f * (y1 - y0));
        let (x, y) = (sx(tv), sy(yv));
        let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{tv:.3}</text>"#, TOP + ph + 18.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, tick(yv));
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{z:.1}" x2="{}" y2="{z:.1}" stroke="#888" stroke-dasharray="4 3"/>"##, LEFT + pw, z = sy(0.0));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">t [s]</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);

    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for (tv, v) in t.iter().zip(values.iter()) {
            if !(tv.is_finite() && v.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(path, "{}{:.2},{:.2} ", if pen_down { 'L' } else { 'M' }, sx(*tv), sy(*v));
            pen_down = true;
        }
        let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.trim_end());
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The four standard panels of a run: states, inputs, weights, and the
/// consolidated barrier with its feasibility row. Returns `(suffix, svg)`.
pub fn run_plots(run_id: &str, table: &Table) -> Vec<(&'static str, String)> {
    let empty: &[f64] = &[];
    let t = table.column("t").unwrap_or(empty);
    let mut h_panel = vec![("H", table.column("H").unwrap_or(empty)), ("b_ccbf", table.column("b_ccbf").unwrap_or(empty))];
    h_panel.extend(table.family("h"));
    vec![
        ("states", line_chart(&format!("{run_id}: state"), t, &table.family("x"))),
        ("inputs", line_chart(&format!("{run_id}: inputs"), t, &table.family("u"))),
        ("weights", line_chart(&format!("{run_id}: weights"), t, &table.family("w"))),
        ("barrier", line_chart(&format!("{run_id}: H, b_ccbf and h_i"), t, &h_panel)),
    ]
}
