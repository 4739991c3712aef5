use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

/// Several evaluation rows over one test corpus. Deltas are against row 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub corpus_checksum: String,
    pub rows: Vec<EvalReport>,
}

impl ComparisonReport {
    pub fn new(rows: Vec<EvalReport>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Config("no evaluation reports to compare".into()))?;
        let checksum = first.corpus_checksum.clone();
        for r in &rows[1..] {
            if r.corpus_checksum != checksum {
                return Err(Error::Config(format!(
                    "report `{}` was evaluated on corpus {} but `{}` on {}",
                    r.label, r.corpus_checksum, first.label, checksum
                )));
            }
        }
        Ok(ComparisonReport {
            corpus_checksum: checksum,
            rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table with branch check columns and deltas.
    pub fn table(&self) -> String {
        let base = &self.rows[0];
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:^3} {:^3} {:^3} {:>7} {:>7} {:>7} {:>8} {:>7} {:>17} {:>8}",
            "row", "co", "pos", "kp", "AP", "AP50", "AP75", "dAP", "amb%", "amb 95% CI", "dAmb"
        );
        for r in &self.rows {
            let b = &r.model.branches;
            let mark = |on: bool| if on { "x" } else { "." };
            let active = !r.model.context_layers().is_empty();
            let _ = writeln!(
                s,
                "{:<18} {:^3} {:^3} {:^3} {:>7.2} {:>7.2} {:>7.2} {:>+8.2} {:>7.2} {:>17} {:>+8.2}",
                truncate(&r.label, 18),
                mark(active && b.co),
                mark(active && b.pos),
                mark(active && b.kp),
                r.ap,
                r.ap50,
                r.ap75,
                r.ap - base.ap,
                r.ambiguous.accuracy,
                format!("[{:.1}, {:.1}] n={}", r.ambiguous.ci_low, r.ambiguous.ci_high, r.ambiguous.matched),
                r.ambiguous.accuracy - base.ambiguous.accuracy,
            );
        }
        let _ = writeln!(s, "corpus {} ({} scenes)", self.corpus_checksum, base.n_scenes);
        let _ = writeln!(s, "protocol: {}", base.protocol);
        s
    }

    /// Bar chart of AP and ambiguous accuracy per row, then mean PR curves at IoU 0.5.
    pub fn svg(&self) -> String {
        const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];
        let n = self.rows.len();
        let (w, h) = (720.0, 640.0);
        let (left, top, chart_h) = (60.0, 30.0, 220.0);
        let slot = (w - left - 20.0) / n as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">AP (solid) and ambiguous-pair accuracy (light), percent</text>"#);
        let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + chart_h, w - 20.0, top + chart_h);
        for tick in [0, 25, 50, 75, 100] {
            let y = top + chart_h * (1.0 - tick as f64 / 100.0);
            let _ = writeln!(s, r##"<text x="{}" y="{:.1}" text-anchor="end">{tick}</text><line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, left - 6.0, y + 4.0, w - 20.0);
        }
        for (i, r) in self.rows.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let x0 = left + slot * i as f64 + slot * 0.1;
            let bw = slot * 0.38;
            for (k, v) in [r.ap, r.ambiguous.accuracy].into_iter().enumerate() {
                let bh = chart_h * v.clamp(0.0, 100.0) / 100.0;
                let opacity = if k == 0 { 1.0 } else { 0.45 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{bh:.1}" fill="{color}" fill-opacity="{opacity}"/>"#,
                    x0 + k as f64 * bw,
                    top + chart_h - bh
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x0 + bw,
                top + chart_h + 14.0,
                escape(&r.label)
            );
        }

        let (pl, pt, ps) = (left, 320.0, 260.0);
        let _ = writeln!(s, r#"<text x="{pl}" y="{}" font-size="13">class-mean precision vs recall, IoU 0.5</text>"#, pt - 10.0);
        let _ = writeln!(s, r#"<rect x="{pl}" y="{pt}" width="{ps}" height="{ps}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, pl + ps / 2.0, pt + ps + 16.0);
        for (i, r) in self.rows.iter().enumerate() {
            let curve = mean_curve(r);
            if curve.is_empty() {
                continue;
            }
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = curve
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let x = pl + ps * k as f64 / (curve.len() - 1) as f64;
                    let y = pt + ps * (1.0 - p);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            let ly = pt + 14.0 * i as f64 + 10.0;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                pl + ps + 20.0,
                ly - 9.0,
                pl + ps + 34.0,
                ly,
                escape(&r.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn mean_curve(r: &EvalReport) -> Vec<f64> {
    let Some(first) = r.pr_curves.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.precision.len()];
    for c in &r.pr_curves {
        for (a, p) in acc.iter_mut().zip(&c.precision) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / r.pr_curves.len() as f64).collect()
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Table, JSON and SVG renderings of a comparison.
pub fn render_report(rows: Vec<EvalReport>) -> Result<(String, String, String)> {
    let c = ComparisonReport::new(rows)?;
    Ok((c.table(), c.to_json()?, c.svg()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AmbiguousAccuracy, PrCurve};
    use crate::model::ModelConfig;
    use crate::relate::Branches;

    fn row(label: &str, branches: Branches, ap: f64, checksum: &str) -> EvalReport {
        EvalReport {
            label: label.into(),
            ap,
            ap50: ap + 10.0,
            ap75: ap - 5.0,
            per_class: vec![],
            ambiguous: AmbiguousAccuracy {
                correct: 5,
                matched: 10,
                accuracy: 50.0,
                ci_low: 23.7,
                ci_high: 76.3,
            },
            pr_curves: vec![PrCurve {
                class: 0,
                precision: vec![1.0, 0.5, 0.0],
            }],
            branches: branches.tag(),
            model: ModelConfig {
                branches,
                ..ModelConfig::default()
            },
            checkpoint: None,
            corpus_checksum: checksum.into(),
            n_scenes: 3,
            protocol: "p".into(),
            provenance: serde_json::Value::Null,
        }
    }

    #[test]
    fn refuses_mixed_corpora() {
        let err = ComparisonReport::new(vec![row("a", Branches::NONE, 1.0, "x"), row("b", Branches::ALL, 2.0, "y")]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ComparisonReport::new(vec![]).is_err());
    }

    #[test]
    fn table_shows_deltas_and_branch_marks() {
        let c = ComparisonReport::new(vec![
            row("baseline", Branches::NONE, 30.0, "x"),
            row("full", Branches::ALL, 32.5, "x"),
        ])
        .unwrap();
        let t = c.table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].contains("+0.00"));
        assert!(lines[2].contains("+2.50"));
        assert_eq!(lines[2].matches(" x ").count(), 3, "{}", lines[2]);
        let svg = c.svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        let back: ComparisonReport = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
