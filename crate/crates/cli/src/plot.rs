//! Self-contained SVG line charts.
//!
//! Each series is one `<polyline>` whose `data-final` attribute holds the
//! exact last y value, so a chart can be checked against its source table.

use std::fmt::Write as _;

use aida_core::trainer::MetricsRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    /// Pairs `step` with the value picked from each row, skipping blanks.
    pub fn from_rows(name: impl Into<String>, rows: &[MetricsRow], pick: impl Fn(&MetricsRow) -> Option<f64>) -> Self {
        let points = rows.iter().filter_map(|r| pick(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v))).collect();
        Series { name: name.into(), points }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn unescape(s: &str) -> String {
    s.replace("&quot;", "\"").replace("&gt;", ">").replace("&lt;", "<").replace("&amp;", "&")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Renders `series` on shared axes. Empty series are listed in the legend
/// but draw nothing.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="#333"/>"##,
        TOP + ph,
        LEFT + pw
    );
    for (v, y) in [(y1, TOP), (y0, TOP + ph)] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.4}</text>"#, LEFT - 6.0, y + 4.0, v);
    }
    for (v, x) in [(x0, LEFT), (x1, LEFT + pw)] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.0}</text>"#, TOP + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, escape(x_label));

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{:.1}" width="14" height="3" fill="{color}"/>"#, LEFT + pw + 14.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}">{}</text>"#, LEFT + pw + 34.0, escape(&ser.name));
        let Some(last) = ser.points.last() else { continue };
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" data-final="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{} final {}</title></polyline>"#,
            escape(&ser.name),
            last.1,
            pts.join(" "),
            escape(&ser.name),
            last.1
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `(series name, final value)` pairs read back from a chart.
pub fn parse_finals(svg: &str) -> Vec<(String, f64)> {
    let attr = |line: &str, key: &str| -> Option<String> {
        let start = line.find(&format!("{key}=\""))? + key.len() + 2;
        let end = start + line[start..].find('"')?;
        Some(line[start..end].to_string())
    };
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .filter_map(|l| Some((unescape(&attr(l, "data-series")?), attr(l, "data-final")?.parse().ok()?)))
        .collect()
}

/// Loss, λ_PMR and mixing-weight charts for a run's metrics rows.
pub fn training_charts(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    let mut out = vec![(
        "loss.svg",
        line_chart(
            "Training loss",
            "step",
            &[
                Series::from_rows("total", rows, |r| Some(r.loss_total)),
                Series::from_rows("id", rows, |r| r.loss_id),
                Series::from_rows("triplet", rows, |r| r.loss_tri),
                Series::from_rows("pmr point", rows, |r| r.loss_pmr_point),
                Series::from_rows("relational", rows, |r| r.loss_rel),
            ],
        ),
    )];
    let lambda = Series::from_rows("lambda_pmr", rows, |r| r.lambda_pmr);
    if !lambda.points.is_empty() {
        out.push(("lambda.svg", line_chart("PMR weight", "step", &[lambda])));
    }
    let k = rows.iter().filter_map(|r| r.alpha.as_ref().map(Vec::len)).max().unwrap_or(0);
    if k > 0 {
        let alpha: Vec<Series> =
            (0..k).map(|j| Series::from_rows(format!("alpha_{}", j + 1), rows, |r| r.alpha.as_ref().map(|a| a[j]))).collect();
        out.push(("alpha.svg", line_chart("Mixing weights", "step", &alpha)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finals_round_trip() {
        let a = Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 0.1 + 0.2)] };
        let b = Series { name: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] };
        let empty = Series { name: "none".into(), points: vec![] };
        let svg = line_chart("t", "step", &[a, b, empty]);
        assert_eq!(parse_finals(&svg), vec![("a<b".to_string(), 0.1 + 0.2), ("flat".to_string(), 2.0)]);
        assert!(svg.ends_with("</svg>\n"));
    }
}
