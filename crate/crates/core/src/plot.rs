//! Static SVG chart of mean MSE against `n`, one panel per `delta`, with the
//! 2.5%–97.5% band shaded behind each estimator's line. Output depends only
//! on the input rows, so equal summaries render to equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CcrError, Result};
use crate::harness::{read_summaries, SummaryRecord};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const LEGEND_H: f64 = 28.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

struct Panel<'a> {
    title: String,
    rows: Vec<&'a SummaryRecord>,
}

fn panels(rows: &[SummaryRecord]) -> Vec<Panel<'_>> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let key = (r.regime.as_str().to_string(), r.delta);
        if !keys.iter().any(|k| k.0 == key.0 && k.1.to_bits() == key.1.to_bits()) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let many_regimes = keys.iter().any(|k| k.0 != keys[0].0);
    keys.into_iter()
        .map(|(regime, delta)| Panel {
            title: if many_regimes {
                format!("{regime}, delta = {delta}")
            } else {
                format!("delta = {delta}")
            },
            rows: rows
                .iter()
                .filter(|r| r.regime.as_str() == regime && r.delta.to_bits() == delta.to_bits())
                .collect(),
        })
        .collect()
}

fn positive(v: f64) -> Option<f64> {
    (v.is_finite() && v > 0.0).then_some(v)
}

/// Decade range `[lo, hi]` (as log10 exponents) covering every positive value.
fn log_range(rows: &[&SummaryRecord]) -> (f64, f64) {
    let vals = rows.iter().flat_map(|r| [r.q025, r.mean_mse, r.q975]).filter_map(positive);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v.log10());
        hi = hi.max(v.log10());
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders summary rows to an SVG document.
pub fn render_svg(rows: &[SummaryRecord]) -> Result<String> {
    if rows.is_empty() {
        return Err(CcrError::InvalidInput("summary has no rows to plot".into()));
    }
    let mut estimators: Vec<&str> = Vec::new();
    for r in rows {
        if !estimators.contains(&r.estimator.as_str()) {
            estimators.push(&r.estimator);
        }
    }
    let color = |name: &str| {
        let i = estimators.iter().position(|e| *e == name).unwrap_or(0);
        PALETTE[i % PALETTE.len()]
    };

    let panels = panels(rows);
    let width = panels.len() as f64 * PANEL_W;
    let height = PANEL_H + LEGEND_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pi as f64 * PANEL_W + MARGIN_L;
        let x1 = (pi + 1) as f64 * PANEL_W - MARGIN_R;
        let y0 = MARGIN_T;
        let y1 = PANEL_H - MARGIN_B;

        let mut ns: Vec<usize> = panel.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let (nmin, nmax) = (ns[0] as f64, ns[ns.len() - 1] as f64);
        let px = |n: usize| {
            if nmax > nmin {
                x0 + (n as f64 - nmin) / (nmax - nmin) * (x1 - x0)
            } else {
                0.5 * (x0 + x1)
            }
        };
        let (lo, hi) = log_range(&panel.rows);
        let py = |v: f64| {
            let l = positive(v).map_or(lo, |v| v.log10()).clamp(lo, hi);
            y1 - (l - lo) / (hi - lo) * (y1 - y0)
        };

        let _ = writeln!(s, r#"<g id="panel-{pi}">"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
            0.5 * (x0 + x1),
            y0 - 14.0,
            esc(&panel.title)
        );
        let mut e = lo as i32;
        while e <= hi as i32 {
            let y = py(10f64.powi(e));
            let _ = writeln!(
                s,
                r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#e0e0e0"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"##,
                x0 - 6.0,
                y + 4.0
            );
            e += 1;
        }
        for &n in &ns {
            let x = px(n);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{y1:.1}" x2="{x:.1}" y2="{:.1}" stroke="#000"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{n}</text>"##,
                y1 + 4.0,
                y1 + 16.0
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#000"/>"##,
            x1 - x0,
            y1 - y0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">n</text>"#,
            0.5 * (x0 + x1),
            y1 + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(-90)" text-anchor="middle">mean MSE</text>"#,
            x0 - 44.0,
            0.5 * (y0 + y1)
        );

        for name in &estimators {
            let mut series: Vec<&&SummaryRecord> =
                panel.rows.iter().filter(|r| r.estimator == *name).collect();
            if series.is_empty() {
                continue;
            }
            series.sort_by_key(|r| r.n);
            let c = color(name);
            let band: Vec<String> = series
                .iter()
                .map(|r| format!("{:.1},{:.1}", px(r.n), py(r.q975)))
                .chain(series.iter().rev().map(|r| format!("{:.1},{:.1}", px(r.n), py(r.q025))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{c}" fill-opacity="0.18" stroke="{c}" stroke-opacity="0.35"/>"#,
                band.join(" ")
            );
            let line: Vec<String> =
                series.iter().map(|r| format!("{:.1},{:.1}", px(r.n), py(r.mean_mse))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.8"/>"#,
                line.join(" ")
            );
            for r in &series {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#,
                    px(r.n),
                    py(r.mean_mse)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let _ = writeln!(s, r#"<g id="legend">"#);
    for (i, name) in estimators.iter().enumerate() {
        let x = MARGIN_L + i as f64 * 96.0;
        let y = PANEL_H + 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="14" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 9.0,
            color(name),
            x + 18.0,
            y,
            esc(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads a summary CSV and writes the chart to `out`.
pub fn plot_summary(summary_csv: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<()> {
    let rows = read_summaries(summary_csv)?;
    let svg = render_svg(&rows)?;
    let out = out.as_ref();
    fs::write(out, svg).map_err(|e| CcrError::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Regime;

    fn row(n: usize, delta: f64, est: &str, m: f64) -> SummaryRecord {
        SummaryRecord {
            regime: Regime::Moderate,
            n,
            delta,
            estimator: est.into(),
            rep_count: 10,
            mean_mse: m,
            q025: m / 2.0,
            q975: m * 2.0,
        }
    }

    #[test]
    fn one_panel_per_delta() {
        let mut rows = Vec::new();
        for d in [0.001, 0.05, 0.65] {
            for n in [300, 500] {
                rows.push(row(n, d, "pca", 1.0));
                rows.push(row(n, d, "cca", 0.01));
            }
        }
        let svg = render_svg(&rows).unwrap();
        assert_eq!(svg.matches("<g id=\"panel-").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(svg.contains(">pca</text>") && svg.contains(">cca</text>"));
    }

    #[test]
    fn single_point_series() {
        let svg = render_svg(&[row(300, 0.65, "cca", 0.5)]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<g id=\"panel-").count(), 1);
    }

    #[test]
    fn deterministic_and_handles_zero() {
        let rows = vec![row(300, 0.65, "oracle", 0.0), row(500, 0.65, "oracle", 1e-3)];
        assert_eq!(render_svg(&rows).unwrap(), render_svg(&rows).unwrap());
        assert!(!render_svg(&rows).unwrap().contains("NaN"));
    }

    #[test]
    fn empty_is_error() {
        assert!(render_svg(&[]).is_err());
    }
}
