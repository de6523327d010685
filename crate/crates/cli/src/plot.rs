//! Deterministic SVG line charts from metric CSVs.

use std::fmt::Write;

use crate::Failure;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
/// Cell text treated as a missing value; the polyline skips it.
pub const MISSING: &str = "n/a";

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)` for every row with a value.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub x_label: String,
    pub series: Vec<Series>,
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<Option<f64>, Failure> {
    let cell = cell.trim();
    if cell == MISSING {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Failure::new(
            "plot",
            format!("row {row}, column `{column}`: non-numeric cell `{cell}`"),
        )),
    }
}

/// Parses a CSV with a header; `x` names the abscissa column (the first
/// column when absent) and `columns` restricts the plotted series (every
/// other column when absent). Rows are numbered from 1 after the header.
pub fn chart_from_csv(text: &str, x: Option<&str>, columns: Option<&[String]>) -> Result<Chart, Failure> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Failure::new("plot", "empty CSV".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    if rows.is_empty() {
        return Err(Failure::new("plot", "CSV has a header but no rows".into()));
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::new("plot", format!("no column `{name}`")))
    };
    let xi = match x {
        Some(name) => col(name)?,
        None => 0,
    };
    let yi: Vec<usize> = match columns {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|&i| i != xi).collect(),
    };
    if yi.is_empty() {
        return Err(Failure::new("plot", "no metric columns to plot".into()));
    }
    let mut series: Vec<Series> = yi
        .iter()
        .map(|&i| Series {
            name: header[i].clone(),
            points: Vec::new(),
        })
        .collect();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Failure::new(
                "plot",
                format!("row {}: {} cells, header has {}", r + 1, row.len(), header.len()),
            ));
        }
        let xv = parse_cell(row[xi], r + 1, &header[xi])?
            .ok_or_else(|| Failure::new("plot", format!("row {}, column `{}`: missing x value", r + 1, header[xi])))?;
        for (s, &i) in series.iter_mut().zip(&yi) {
            if let Some(v) = parse_cell(row[i], r + 1, &header[i])? {
                s.points.push((xv, v));
            }
        }
    }
    Ok(Chart {
        x_label: header[xi].clone(),
        series,
    })
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the chart on a fixed canvas with fixed-precision coordinates.
pub fn render_svg(chart: &Chart, title: &str) -> String {
    let (x0, x1) = range(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = {
        let (lo, hi) = range(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        (lo.min(0.0), hi.max(1.0))
    };
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(title)
    );
    let (bx, by) = (MARGIN_LEFT, MARGIN_TOP + ph);
    let _ = writeln!(
        s,
        r#"<path d="M{bx:.2} {MARGIN_TOP:.2} L{bx:.2} {by:.2} L{:.2} {by:.2}" fill="none" stroke="black"/>"#,
        bx + pw
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            sx(xv),
            by + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            bx - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&series.name),
            pts.join(" ")
        );
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let t = format!("{v:.2}");
    if t == "-0.00" {
        "0.00".into()
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_give_two_point_polylines() {
        let c = chart_from_csv("fraction,a,b\n0,0.1,0.2\n100,0.5,0.7\n", None, None).unwrap();
        assert_eq!(c.series.len(), 2);
        assert!(c.series.iter().all(|s| s.points.len() == 2));
        let svg = render_svg(&c, "t");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, render_svg(&c, "t"));
    }

    #[test]
    fn missing_values_are_skipped() {
        let c = chart_from_csv("x,y\n0,n/a\n1,0.5\n2,0.6\n", None, None).unwrap();
        assert_eq!(c.series[0].points, vec![(1.0, 0.5), (2.0, 0.6)]);
    }

    #[test]
    fn errors_name_row_and_column() {
        let e = chart_from_csv("x,acc\n0,0.1\n1,high\n", None, None).unwrap_err();
        assert!(e.msg.contains("row 2") && e.msg.contains("`acc`"), "{}", e.msg);
        assert!(chart_from_csv("", None, None).is_err());
        assert!(chart_from_csv("x,y\n", None, None).is_err());
        assert!(chart_from_csv("x,y\n0,1\n", Some("z"), None).is_err());
    }

    #[test]
    fn selects_columns() {
        let names = vec!["b".to_string()];
        let c = chart_from_csv("x,a,b\n0,text,1\n", Some("x"), Some(&names)).unwrap();
        assert_eq!(c.series.len(), 1);
        assert_eq!(c.series[0].name, "b");
    }
}
