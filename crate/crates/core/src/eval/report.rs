//! Comma-separated report tables.

use std::fmt::Write;

use super::{CorrelationMatrix, DensityGrid, Divergences, Usage};

pub fn divergence_csv(rows: &[(String, String, Divergences)]) -> String {
    let mut s = String::from("agent,reference,kl,js,chi2,wasserstein\n");
    for (a, r, d) in rows {
        let _ = writeln!(s, "{a},{r},{},{},{},{}", d.kl, d.js, d.chi2, d.wasserstein);
    }
    s
}

/// Rows are signature groups, columns the α components named by `labels`;
/// the last column lists components whose coefficient was undefined.
pub fn correlation_csv(m: &CorrelationMatrix, labels: &[String]) -> String {
    let mut s = String::from("group");
    for l in labels {
        let _ = write!(s, ",{l}");
    }
    s.push_str(",degenerate\n");
    for ((g, row), deg) in m.groups.iter().zip(&m.coefficients).zip(&m.degenerate) {
        s.push_str(g);
        for c in row {
            let _ = write!(s, ",{c}");
        }
        let undefined: Vec<&str> = labels
            .iter()
            .zip(deg)
            .filter(|(_, d)| **d)
            .map(|(l, _)| l.as_str())
            .collect();
        let _ = writeln!(s, ",{}", undefined.join(" "));
    }
    s
}

/// One row per (method, α) with mean and std per signature group.
pub fn usage_csv(rows: &[(String, Vec<f64>, Usage)]) -> String {
    let mut s = String::from("method,alpha");
    if let Some((_, _, u)) = rows.first() {
        for g in &u.groups {
            let _ = write!(s, ",{g}_mean,{g}_std");
        }
    }
    s.push('\n');
    for (method, alpha, u) in rows {
        let a: Vec<String> = alpha.iter().map(|v| v.to_string()).collect();
        let _ = write!(s, "{method},{}", a.join(" "));
        for m in &u.summary {
            let _ = write!(s, ",{},{}", m.mean, m.std);
        }
        s.push('\n');
    }
    s
}

pub fn density_csv(g: &DensityGrid) -> String {
    let mut s = String::from("x,y,density\n");
    for (iy, y) in g.centers.iter().enumerate() {
        for (ix, x) in g.centers.iter().enumerate() {
            let _ = writeln!(s, "{x},{y},{}", g.at(ix, iy));
        }
    }
    s
}
