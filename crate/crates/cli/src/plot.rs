use std::fmt::Write;

use mino_core::FunctionBatch;

const PALETTE: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn colour(u: f64) -> String {
    let u = u.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (u.floor() as usize).min(PALETTE.len() - 2);
    let f = u - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    let mix = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Heatmap of an x-major `nx * ny` field, one square cell per grid point.
pub fn heatmap_svg(field: &[f64], nx: usize, ny: usize, cell: usize) -> String {
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (nx * cell, ny * cell);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for i in 0..nx {
        for j in 0..ny {
            let v = field[i * ny + j];
            // y grows upward in the domain, downward in SVG.
            let (x, y) = (i * cell, (ny - 1 - j) * cell);
            writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>", colour((v - lo) / span)).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One row per point: coordinates then one value column per channel.
pub fn sample_csv(batch: &FunctionBatch<f64>, s: usize) -> String {
    let pts = batch.points();
    let dim = pts.dim();
    let n = pts.len();
    let coords = ["x", "y", "z"];
    let mut header: Vec<String> = coords[..dim].iter().map(|c| c.to_string()).collect();
    header.extend((0..batch.f_dim()).map(|c| format!("value{c}")));
    let mut out = header.join(",") + "\n";
    let sample = batch.sample(s);
    for i in 0..n {
        let mut row: Vec<String> = pts.point(i).iter().map(|v| v.to_string()).collect();
        row.extend((0..batch.f_dim()).map(|c| sample[c * n + i].to_string()));
        out += &row.join(",");
        out.push('\n');
    }
    out
}
