//! Static SVG line charts of value paths.

use std::fmt::Write as _;

use chrono::NaiveDate;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Renders one polyline of `values` against their index, labelled with the
/// first and last dates and the value range.
pub fn line_chart(title: &str, dates: &[NaiveDate], values: &[f64]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="25" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    if values.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let steps = (values.len() - 1).max(1) as f64;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = x0 + (x1 - x0) * i as f64 / steps;
            let y = y0 - (y0 - y1) * (v - lo) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#,
        points.join(" ")
    );
    let label = |svg: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{text}</text>"#
        );
    };
    label(&mut svg, x0 - 5.0, y0, "end", format!("{lo:.4}"));
    label(&mut svg, x0 - 5.0, y1 + 10.0, "end", format!("{hi:.4}"));
    if let (Some(first), Some(last)) = (dates.first(), dates.last()) {
        label(&mut svg, x0, y0 + 18.0, "start", first.to_string());
        label(&mut svg, x1, y0 + 18.0, "end", last.to_string());
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_point_per_value() {
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let svg = line_chart("a<b", &[d, d, d], &[1.0, 2.0, 1.5]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a&lt;b"));
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(poly.matches(',').count(), 3);
    }

    #[test]
    fn flat_and_empty_paths_render() {
        assert!(line_chart("flat", &[], &[1.0, 1.0]).contains("<polyline"));
        assert!(!line_chart("empty", &[], &[]).contains("<polyline"));
    }
}
