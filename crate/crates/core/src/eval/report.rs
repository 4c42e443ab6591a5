//! Metric reports, table-shaped CSV output, and a latent scatter plot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{DiversityScore, ProbeResult};
use crate::error::{Result, VqgError};
use crate::objective::{Space, VariantName};

/// Metrics of one latent space of one variant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceMetrics {
    pub bleu: [f64; 4],
    pub cider: f64,
    pub probe_answer: Option<ProbeResult>,
    pub probe_category: Option<ProbeResult>,
    pub relevance_image_pct: f64,
    pub relevance_category_pct: f64,
    pub diversity: BTreeMap<String, DiversityScore>,
}

impl SpaceMetrics {
    /// Fills fields that are empty here from `other`.
    pub fn merge(&mut self, other: &SpaceMetrics) {
        if self.bleu == [0.0; 4] && self.cider == 0.0 {
            self.bleu = other.bleu;
            self.cider = other.cider;
            self.relevance_image_pct = other.relevance_image_pct;
            self.relevance_category_pct = other.relevance_category_pct;
        }
        if self.diversity.is_empty() {
            self.diversity = other.diversity.clone();
        }
        self.probe_answer = self.probe_answer.or(other.probe_answer);
        self.probe_category = self.probe_category.or(other.probe_category);
    }
}

/// Metrics of one variant, with the effective configuration echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: VariantName,
    pub spaces: BTreeMap<Space, SpaceMetrics>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn fmt_opt(p: Option<ProbeResult>) -> String {
    p.map(|p| format!("{:.2}", p.accuracy_pct)).unwrap_or_default()
}

/// One row per (variant, space): language metrics, probe accuracies, and
/// relevance.
pub fn table1_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(VqgError::Data("no reports to tabulate".into()));
    }
    let mut out = String::from(
        "variant,space,bleu1,bleu2,bleu3,bleu4,cider,probe_answer_acc,probe_category_acc,relevance_image_pct,relevance_category_pct\n",
    );
    for r in reports {
        for (space, m) in &r.spaces {
            writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{:.2},{:.2}",
                r.variant.label(),
                space,
                m.bleu[0],
                m.bleu[1],
                m.bleu[2],
                m.bleu[3],
                m.cider,
                fmt_opt(m.probe_answer),
                fmt_opt(m.probe_category),
                m.relevance_image_pct,
                m.relevance_category_pct
            )
            .unwrap();
        }
    }
    Ok(out)
}

/// One row per (variant, space) with strength and inventiveness columns for
/// every category.
pub fn table3_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(VqgError::Data("no reports to tabulate".into()));
    }
    let cats: BTreeSet<&String> = reports
        .iter()
        .flat_map(|r| r.spaces.values())
        .flat_map(|m| m.diversity.keys())
        .collect();
    let mut out = String::from("variant,space");
    for c in &cats {
        write!(out, ",{c}_strength,{c}_inventiveness").unwrap();
    }
    out.push('\n');
    for r in reports {
        for (space, m) in &r.spaces {
            if m.diversity.is_empty() {
                continue;
            }
            write!(out, "{},{}", r.variant.label(), space).unwrap();
            for c in &cats {
                match m.diversity.get(*c) {
                    Some(d) => write!(out, ",{:.2},{:.2}", d.strength, d.inventiveness).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Projection onto the top two principal directions (found by power
/// iteration with deflation).
pub fn project_2d(codes: &Array2<f64>) -> Vec<(f64, f64)> {
    let n = codes.nrows();
    if n == 0 {
        return Vec::new();
    }
    let mean = codes.mean_axis(Axis(0)).expect("non-empty");
    let centered = codes - &mean.insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / n as f64;
    let d = cov.nrows();
    let mut dirs = Vec::new();
    for k in 0..2 {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + ((i + k) % 3) as f64);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w / norm;
            lambda = norm;
        }
        let outer = Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j]);
        cov = cov - outer * lambda;
        dirs.push(v);
    }
    (0..n)
        .map(|r| {
            let row = centered.row(r);
            (row.dot(&dirs[0]), if d > 1 { row.dot(&dirs[1]) } else { 0.0 })
        })
        .collect()
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// SVG scatter of 2-D points colored by label, with a legend.
pub fn scatter_svg(points: &[(f64, f64)], labels: &[usize], names: &[String], title: &str) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad - 120.0);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{title}</text>"#).unwrap();
    for (&(x, y), &l) in points.iter().zip(labels) {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            sx(x),
            sy(y),
            PALETTE[l % PALETTE.len()]
        )
        .unwrap();
    }
    for (k, name) in names.iter().enumerate() {
        let y = pad + 18.0 * k as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, w - 130.0, y, PALETTE[k % PALETTE.len()]).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#, w - 114.0, y + 9.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
