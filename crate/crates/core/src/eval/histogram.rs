use serde::{Deserialize, Serialize};

use super::divergence::{divergences, Divergences};
use crate::envs::{Action, ActionSpec};
use crate::error::{Error, Result};

pub const CONTINUOUS_BINS: usize = 21;

/// Counts and probabilities over one action dimension (or the categories).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n + 1` edges for continuous bins; empty for categories.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    pub bin_width: f64,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>, edges: Vec<f64>, bin_width: f64) -> Self {
        let total: u64 = counts.iter().sum();
        let probs = counts
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect();
        Self {
            edges,
            counts,
            probs,
            bin_width,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bin index of `x` on `bins` equal bins over `[-1, 1]`; the upper edge
/// belongs to the last bin.
pub fn bin_of(x: f64, bins: usize) -> usize {
    let t = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
    t.min(bins - 1)
}

/// Per-dimension marginals (continuous) or one categorical histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionHistogram {
    pub spec: ActionSpec,
    pub dims: Vec<Histogram>,
}

impl ActionHistogram {
    pub fn from_actions<'a, I>(spec: ActionSpec, actions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Action>,
    {
        match spec {
            ActionSpec::Discrete { count } => {
                let mut c = vec![0u64; count];
                for a in actions {
                    spec.validate_action(a)?;
                    c[a.as_discrete().unwrap()] += 1;
                }
                Ok(Self {
                    spec,
                    dims: vec![Histogram::from_counts(c, Vec::new(), 1.0)],
                })
            }
            ActionSpec::Continuous { dims } => {
                let mut c = vec![vec![0u64; CONTINUOUS_BINS]; dims];
                for a in actions {
                    spec.validate_action(a)?;
                    for (d, x) in a.as_continuous().unwrap().iter().enumerate() {
                        c[d][bin_of(*x, CONTINUOUS_BINS)] += 1;
                    }
                }
                let w = 2.0 / CONTINUOUS_BINS as f64;
                let edges: Vec<f64> = (0..=CONTINUOUS_BINS).map(|i| -1.0 + w * i as f64).collect();
                Ok(Self {
                    spec,
                    dims: c
                        .into_iter()
                        .map(|c| Histogram::from_counts(c, edges.clone(), w))
                        .collect(),
                })
            }
        }
    }

    /// Divergences averaged over dimensions.
    pub fn divergences(&self, other: &ActionHistogram) -> Result<Divergences> {
        if self.spec != other.spec {
            return Err(Error::Format(format!(
                "histogram specs differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        let mut acc = Divergences::default();
        for (a, b) in self.dims.iter().zip(&other.dims) {
            let d = divergences(&a.probs, &b.probs, a.bin_width)?;
            acc.kl += d.kl;
            acc.js += d.js;
            acc.chi2 += d.chi2;
            acc.wasserstein += d.wasserstein;
        }
        let n = self.dims.len() as f64;
        Ok(Divergences {
            kl: acc.kl / n,
            js: acc.js / n,
            chi2: acc.chi2 / n,
            wasserstein: acc.wasserstein / n,
        })
    }
}
