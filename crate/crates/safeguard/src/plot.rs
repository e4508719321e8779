//! Position-versus-time SVG: safe band, true and estimated traces, and the
//! robustness band of half-width epsilon around the estimate.

use std::fmt::Write as _;
use std::io::Read;

use crate::formats::FormatError;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 450.0;
const MARGIN: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotOptions {
    /// Half-width of the band drawn around the estimate; none when zero.
    pub epsilon: f64,
    /// Upper edge of the safe region.
    pub x_max: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { epsilon: 0.0, x_max: 2.0 }
    }
}

/// `(t, x_true, x_est)` samples from a log CSV. Other columns are ignored.
pub fn read_traces<R: Read>(input: R) -> Result<Vec<(f64, f64, f64)>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FormatError::Schema(format!("log has no `{name}` column")))
    };
    let (it, ix, ie) = (col("t")?, col("x_true")?, col("x_est")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|f| f.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| FormatError::Schema(format!("bad number in column `{}`", &header[i])))
        };
        out.push((num(it)?, num(ix)?, num(ie)?));
    }
    if out.is_empty() {
        return Err(FormatError::Schema("log has no rows".into()));
    }
    Ok(out)
}

pub fn render_svg(traces: &[(f64, f64, f64)], opts: &PlotOptions) -> String {
    let eps = opts.epsilon.max(0.0);
    let t0 = traces.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let mut t1 = traces.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    if t1 <= t0 {
        t1 = t0 + 1.0;
    }
    let positions = traces.iter().flat_map(|r| [r.1, r.2 - eps, r.2 + eps]);
    let lo = positions.clone().fold(0.0f64, f64::min).min(opts.x_max);
    let hi = positions.fold(opts.x_max, f64::max);
    let pad = 0.1 * (hi - lo).max(1e-3);
    let (y0, y1) = (lo - pad, hi + pad);
    let sx = |t: f64| MARGIN + (t - t0) / (t1 - t0) * (WIDTH - 2.0 * MARGIN);
    let sy = |x: f64| HEIGHT - MARGIN - (x - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let points = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        pts.map(|(t, x)| format!("{:.2},{:.2}", sx(t), sy(x))).collect::<Vec<_>>().join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (band_top, band_bottom) = (sy(opts.x_max), sy(y0));
    let _ = writeln!(
        s,
        r##"<rect class="safe-band" x="{:.2}" y="{band_top:.2}" width="{:.2}" height="{:.2}" fill="#2a9d8f" fill-opacity="0.15"/>"##,
        MARGIN,
        WIDTH - 2.0 * MARGIN,
        band_bottom - band_top
    );
    if eps > 0.0 {
        let upper = traces.iter().map(|r| (r.0, r.2 + eps));
        let lower = traces.iter().rev().map(|r| (r.0, r.2 - eps));
        let _ = writeln!(
            s,
            r##"<polygon class="robustness-band" points="{}" fill="#e9c46a" fill-opacity="0.35" stroke="none"/>"##,
            points(&mut upper.chain(lower))
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#264653" stroke-width="1"/>"##,
        band_top,
        WIDTH - MARGIN,
        band_top
    );
    let _ = writeln!(
        s,
        r##"<polyline class="true" points="{}" fill="none" stroke="#1d3557" stroke-width="2"/>"##,
        points(&mut traces.iter().map(|r| (r.0, r.1)))
    );
    let _ = writeln!(
        s,
        r##"<polyline class="estimate" points="{}" fill="none" stroke="#e63946" stroke-width="2" stroke-dasharray="6 4"/>"##,
        points(&mut traces.iter().map(|r| (r.0, r.2)))
    );
    let axis = HEIGHT - MARGIN;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{axis}" x2="{:.2}" y2="{axis}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{axis}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">time (s)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {:.2})">position (m)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (v, anchor_x, anchor_y, anchor) in [
        (t0, sx(t0), axis + 18.0, "middle"),
        (t1, sx(t1), axis + 18.0, "middle"),
        (y0, MARGIN - 6.0, sy(y0), "end"),
        (opts.x_max, MARGIN - 6.0, sy(opts.x_max), "end"),
        (y1, MARGIN - 6.0, sy(y1), "end"),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.2}" y="{anchor_y:.2}" text-anchor="{anchor}" font-size="12">{v:.2}</text>"#
        );
    }
    s.push_str("</svg>\n");
    s
}
