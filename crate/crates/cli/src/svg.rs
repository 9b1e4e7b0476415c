//! Self-contained SVG heatmaps and line plots.

use std::fmt::Write as _;

use crate::error::CliError;

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 40.0;
const PLOT: f64 = 380.0;
const LEVELS: usize = 256;

/// Cell values on a rectangular grid, `values[i * ny + j]` at `(xs[i], ys[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

/// Columns of a CSV whose first column is the abscissa.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub x_label: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

fn parse_field(s: &str, line: usize) -> Result<f64, CliError> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("nan") || t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse()
        .map_err(|_| CliError::Usage(format!("line {line}: cannot parse '{t}' as a number")))
}

fn rows(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::usage("empty CSV"))?
        .1
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut out = Vec::new();
    for (k, line) in lines {
        let row = line
            .split(',')
            .map(|f| parse_field(f, k + 1))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(CliError::Usage(format!("line {}: expected {} fields", k + 1, header.len())));
        }
        out.push(row);
    }
    Ok((header, out))
}

pub fn is_grid_csv(text: &str) -> bool {
    text.lines().next().is_some_and(|h| h.trim() == "x,y,value")
}

fn distinct_sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn heatmap_from_csv(text: &str) -> Result<Heatmap, CliError> {
    let (header, data) = rows(text)?;
    if header != ["x", "y", "value"] {
        return Err(CliError::usage("grid CSV must have header x,y,value"));
    }
    if data.is_empty() {
        return Err(CliError::usage("grid CSV has no rows"));
    }
    if data.iter().any(|r| !r[0].is_finite() || !r[1].is_finite()) {
        return Err(CliError::usage("grid coordinates must be finite"));
    }
    let xs = distinct_sorted(data.iter().map(|r| r[0]));
    let ys = distinct_sorted(data.iter().map(|r| r[1]));
    let mut values = vec![None; xs.len() * ys.len()];
    for r in &data {
        let i = xs.partition_point(|&x| x < r[0]);
        let j = ys.partition_point(|&y| y < r[1]);
        values[i * ys.len() + j] = r[2].is_finite().then_some(r[2]);
    }
    Ok(Heatmap { xs, ys, values })
}

pub fn curves_from_csv(text: &str) -> Result<Curves, CliError> {
    let (header, data) = rows(text)?;
    if header.len() < 2 {
        return Err(CliError::usage("curve CSV needs an x column and at least one series"));
    }
    Ok(Curves {
        x_label: header[0].clone(),
        x: data.iter().map(|r| r[0]).collect(),
        series: header[1..]
            .iter()
            .enumerate()
            .map(|(k, name)| (name.clone(), data.iter().map(|r| r[k + 1]).collect()))
            .collect(),
    })
}

/// Viridis anchors, interpolated linearly.
const VIRIDIS: [(f64, f64, f64); 6] = [
    (68.0, 1.0, 84.0),
    (65.0, 68.0, 135.0),
    (42.0, 120.0, 142.0),
    (34.0, 168.0, 132.0),
    (122.0, 209.0, 81.0),
    (253.0, 231.0, 37.0),
];

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let k = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - k as f64;
    let (a, b) = (VIRIDIS[k], VIRIDIS[k + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if (1e-3..1e4).contains(&v.abs()) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.3e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + PLOT / 2.0,
        escape(title)
    );
}

/// Heatmap with `x` to the right and `y` upwards. Invalid cells are grey.
/// Runs of equal colour along a row are merged into one rectangle.
pub fn render_heatmap(h: &Heatmap, title: &str) -> String {
    let finite: Vec<f64> = h.values.iter().flatten().copied().collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: Option<f64>| -> Option<usize> {
        let v = v?;
        Some(if hi > lo {
            (((v - lo) / (hi - lo)) * (LEVELS - 1) as f64).round() as usize
        } else {
            LEVELS / 2
        })
    };
    let (nx, ny) = (h.xs.len(), h.ys.len());
    let (cw, ch) = (PLOT / nx as f64, PLOT / ny as f64);

    let mut out = String::new();
    open(&mut out, title);
    for j in 0..ny {
        let y = TOP + PLOT - (j + 1) as f64 * ch;
        let mut i = 0;
        while i < nx {
            let l = level(h.values[i * ny + j]);
            let mut end = i + 1;
            while end < nx && level(h.values[end * ny + j]) == l {
                end += 1;
            }
            let fill = match l {
                Some(l) => color(l as f64 / (LEVELS - 1) as f64),
                None => "#999999".into(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}" shape-rendering="crispEdges"/>"#,
                LEFT + i as f64 * cw,
                y,
                (end - i) as f64 * cw,
                ch
            );
            i = end;
        }
    }
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    axis_labels(&mut out, h.xs[0], h.xs[nx - 1], h.ys[0], h.ys[ny - 1]);

    // legend
    let lx = LEFT + PLOT + 25.0;
    if finite.is_empty() {
        let _ = writeln!(out, r#"<text x="{lx}" y="{}">no valid cells</text>"#, TOP + 12.0);
    } else if hi > lo {
        let steps = 32;
        for k in 0..steps {
            let _ = writeln!(
                out,
                r#"<rect x="{lx}" y="{:.3}" width="18" height="{:.3}" fill="{}"/>"#,
                TOP + PLOT - (k + 1) as f64 * PLOT / steps as f64,
                PLOT / steps as f64 + 0.5,
                color(k as f64 / (steps - 1) as f64)
            );
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 22.0, TOP + 10.0, num(hi));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 22.0, TOP + PLOT, num(lo));
    } else {
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{TOP}" width="18" height="18" fill="{}"/>"#,
            color(0.5)
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 22.0, TOP + 13.0, num(lo));
    }
    out.push_str("</svg>\n");
    out
}

fn axis_labels(out: &mut String, x0: f64, x1: f64, y0: f64, y1: f64) {
    let base = TOP + PLOT;
    let _ = writeln!(out, r#"<text x="{LEFT}" y="{}" text-anchor="middle">{}</text>"#, base + 16.0, num(x0));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + PLOT,
        base + 16.0,
        num(x1)
    );
    let _ = writeln!(out, r#"<text x="{}" y="{base}" text-anchor="end">{}</text>"#, LEFT - 6.0, num(y0));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 6.0, TOP + 10.0, num(y1));
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of every series against `x`. With `log_y`, non-positive values
/// break the line and the axis is labelled in decades.
pub fn render_curves(c: &Curves, title: &str, log_y: bool) -> String {
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let ys: Vec<f64> = c
        .series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|v| v.is_finite() && (!log_y || *v > 0.0))
        .map(ty)
        .collect();
    let xs: Vec<f64> = c.x.iter().copied().filter(|v| v.is_finite()).collect();
    let (mut x0, mut x1) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y0, mut y1) = (
        ys.iter().copied().fold(f64::INFINITY, f64::min),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    if !(x0 < x1) {
        (x0, x1) = if x0.is_finite() { (x0 - 0.5, x0 + 0.5) } else { (0.0, 1.0) };
    }
    if log_y && y0.is_finite() {
        (y0, y1) = (y0.floor(), y1.ceil());
    }
    if !(y0 < y1) {
        (y0, y1) = if y0.is_finite() { (y0 - 0.5, y0 + 0.5) } else { (0.0, 1.0) };
    }
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * PLOT;
    let py = |y: f64| TOP + PLOT - (y - y0) / (y1 - y0) * PLOT;

    let mut out = String::new();
    open(&mut out, title);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    if log_y {
        let mut d = y0 as i32;
        while d as f64 <= y1 {
            let y = py(d as f64);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" x2="{}" y1="{y:.3}" y2="{y:.3}" stroke="#dddddd"/>"##,
                LEFT + PLOT
            );
            let _ = writeln!(out, r#"<text x="{}" y="{:.3}" text-anchor="end">1e{d}</text>"#, LEFT - 6.0, y + 4.0);
            d += 1;
        }
    } else {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 6.0, TOP + PLOT, num(y0));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 6.0, TOP + 10.0, num(y1));
    }
    let base = TOP + PLOT;
    let _ = writeln!(out, r#"<text x="{LEFT}" y="{}" text-anchor="middle">{}</text>"#, base + 16.0, num(x0));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + PLOT,
        base + 16.0,
        num(x1)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + PLOT / 2.0,
        base + 32.0,
        escape(&c.x_label)
    );

    for (k, (name, values)) in c.series.iter().enumerate() {
        let stroke = PALETTE[k % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, out: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#,
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for (&x, &v) in c.x.iter().zip(values) {
            if x.is_finite() && v.is_finite() && (!log_y || v > 0.0) {
                segment.push(format!("{:.3},{:.3}", px(x), py(ty(v))));
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let lx = LEFT + PLOT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="{stroke}" stroke-width="2"/>"#,
            lx + 16.0,
            ly - 4.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{ly:.1}">{}</text>"#, lx + 20.0, escape(name));
    }
    out.push_str("</svg>\n");
    out
}
