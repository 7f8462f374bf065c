use std::fmt::Write as _;
use std::path::Path;

use super::{ConfusionMatrix, PrPoint};
use crate::error::{Error, Result};

const HEADER: &str = "score,precision,recall";

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = format!("{HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.score, p.precision, p.recall);
    }
    s
}

pub fn write_pr_csv(points: &[PrPoint], path: &Path) -> Result<()> {
    std::fs::write(path, pr_csv(points)).map_err(|e| Error::io(path, e))
}

/// Parses the output of [`write_pr_csv`].
pub fn parse_pr_csv(text: &str) -> Result<Vec<PrPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Validation(format!("PR csv must start with `{HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<f64> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Validation(format!("PR csv line {}: {e}", i + 2)))?;
            match f[..] {
                [score, precision, recall] => Ok(PrPoint { score, precision, recall }),
                _ => Err(Error::Validation(format!("PR csv line {}: expected 3 fields", i + 2))),
            }
        })
        .collect()
}

/// Self-contained SVG: unit-square axes with ticks and the curve as one polyline.
pub fn pr_svg(points: &[PrPoint], title: &str) -> String {
    let (w, h, m) = (420.0, 420.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let x = |r: f64| m + r * pw;
    let y = |p: f64| h - m - p * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="25" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#, x(0.0), y(1.0), x(0.0), y(0.0), x(1.0), y(0.0));
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{t:.1}</text>"#, x(t), y(0.0) + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{t:.1}</text>"#, x(0.0) - 5.0, y(t) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">recall</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">precision</text>"#, h / 2.0, h / 2.0);
    let pts: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

pub fn write_pr_svg(points: &[PrPoint], title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, pr_svg(points, title)).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        assert_eq!(pr_csv(&[]), "score,precision,recall\n");
        let pts = vec![
            PrPoint { score: 0.9, precision: 1.0, recall: 0.5 },
            PrPoint { score: 0.7, precision: 0.5, recall: 0.5 },
            PrPoint { score: 0.1, precision: 2.0 / 3.0, recall: 1.0 },
        ];
        let text = pr_csv(&pts);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(parse_pr_csv(&text).unwrap(), pts);
        assert!(pr_svg(&pts, "t").contains("<polyline"));
    }
}

/// Confusion matrix as CSV: one row per ground-truth class, one column per
/// predicted class, with `background` last on both axes.
pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let names: Vec<&str> = class_names.iter().map(String::as_str).chain(["background"]).collect();
    let mut s = format!("gt\\pred,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&cm.counts) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{name},{}", cells.join(","));
    }
    s
}
