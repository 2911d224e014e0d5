//! Flash tables, scatter plots and summaries on disk.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

/// One flash. `k` counts the flashes of its type within the trajectory,
/// starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlashRow {
    pub trajectory: usize,
    pub kind: usize,
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

fn num(v: f64) -> String {
    // 17 significant digits round-trip any f64
    format!("{v:.16e}")
}

pub fn csv(rows: &[FlashRow], d: usize) -> String {
    let mut out = String::from("trajectory,type,k,t");
    if d == 1 {
        out.push_str(",x");
    } else {
        for i in 1..=d {
            let _ = write!(out, ",x{i}");
        }
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.trajectory, r.kind, r.k, num(r.t));
        for v in &r.x {
            let _ = write!(out, ",{}", num(*v));
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 4] = ["#1f5fa8", "#c2412d", "#2e8540", "#7a4fa3"];

/// Space-time scatter, time upward, first spatial coordinate across, one
/// dot per flash coloured by type. Without flashes only the axes are drawn.
pub fn svg(rows: &[FlashRow]) -> String {
    let (w, h, m) = (640.0, 480.0, 56.0);
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut rows.iter().filter_map(|r| r.x.first().copied()));
    let (t0, t1) = range(&mut rows.iter().map(|r| r.t));
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |t: f64| h - m - (t - t0) / (t1 - t0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{m}" y2="{m}"/>"#, h - m);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">x</text>"#, w / 2.0, h - 14.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle">t</text>"#, h / 2.0);
    let _ = writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">{x0:.3}</text>"#, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, w - m, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t0:.3}</text>"#, m - 4.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t1:.3}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(s, "</g>");
    for r in rows {
        let Some(&x) = r.x.first() else { continue };
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}"/>"#, px(x), py(r.t), PALETTE[r.kind % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    write_text(path, &text)
}
