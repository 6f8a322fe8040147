//! Histogram divergences.
//!
//! KL and χ² smooth both inputs with `ε = 1e-8` per bin and renormalize, so
//! empty bins stay finite and identical inputs still score exactly zero.
//! JS and W1 use the raw probabilities; JS is clamped to `[0, ln 2]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SMOOTHING: f64 = 1e-8;

fn check(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Length {
            context: "histogram supports".into(),
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Usage("empty histogram".into()));
    }
    Ok(())
}

pub fn smooth(p: &[f64]) -> Vec<f64> {
    let z = 1.0 + SMOOTHING * p.len() as f64;
    p.iter().map(|v| (v + SMOOTHING) / z).collect()
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    Ok(kl_raw(&smooth(p), &smooth(q)))
}

pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    // disjoint supports land on ln 2 up to rounding
    Ok((0.5 * kl_raw(p, &m) + 0.5 * kl_raw(q, &m)).clamp(0.0, std::f64::consts::LN_2))
}

pub fn chi2(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    let (p, q) = (smooth(p), smooth(q));
    Ok(p.iter().zip(&q).map(|(p, q)| (p - q) * (p - q) / q).sum())
}

pub fn wasserstein1(p: &[f64], q: &[f64], bin_width: f64) -> Result<f64> {
    check(p, q)?;
    let (mut cp, mut cq, mut acc) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        acc += (cp - cq).abs();
    }
    Ok(acc * bin_width)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Divergences {
    pub kl: f64,
    pub js: f64,
    pub chi2: f64,
    pub wasserstein: f64,
}

pub fn divergences(p: &[f64], q: &[f64], bin_width: f64) -> Result<Divergences> {
    Ok(Divergences {
        kl: kl(p, q)?,
        js: js(p, q)?,
        chi2: chi2(p, q)?,
        wasserstein: wasserstein1(p, q, bin_width)?,
    })
}
