//! Gaussian kernel density over `[-1, 1]²` with reflection at the borders.
//!
//! Each grid value is the kernel mass inside its cell divided by the cell
//! area, so the grid integrates to the captured mass (≈ 1) exactly under
//! the midpoint quadrature.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

pub const BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub size: usize,
    /// Cell centers, shared by both axes.
    pub centers: Vec<f64>,
    pub bandwidth: [f64; 2],
    /// Row-major `[y][x]`.
    pub density: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_width(&self) -> f64 {
        2.0 / self.size as f64
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.density[iy * self.size + ix]
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_width().powi(2)
    }

    /// Cells strictly greater than their 8 neighbours.
    pub fn local_maxima(&self) -> Vec<(usize, usize)> {
        let n = self.size as i64;
        let mut out = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let v = self.at(x as usize, y as usize);
                let mut best = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && nx < n && ny < n {
                            best &= v > self.at(nx as usize, ny as usize);
                        }
                    }
                }
                if best && v > 0.0 {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }
}

/// Scott's rule in two dimensions: `σ · n^(-1/6)`, floored.
pub fn scott_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (var.sqrt() * n.powf(-1.0 / 6.0)).max(BANDWIDTH_FLOOR)
}

fn phi(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Kernel mass of each cell along one axis, reflected at ±1.
fn cell_masses(mu: f64, h: f64, size: usize) -> Vec<f64> {
    let w = 2.0 / size as f64;
    (0..size)
        .map(|i| {
            let (a, b) = (-1.0 + w * i as f64, -1.0 + w * (i + 1) as f64);
            [mu, 2.0 - mu, -2.0 - mu]
                .iter()
                .map(|m| phi((b - m) / h) - phi((a - m) / h))
                .sum()
        })
        .collect()
}

pub fn kde(samples: &[[f64; 2]], size: usize) -> Result<DensityGrid> {
    if samples.len() < 2 {
        return Err(Error::Usage("kde needs at least two samples".into()));
    }
    if size == 0 {
        return Err(Error::Usage("kde grid size must be positive".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s[0].clamp(-1.0, 1.0)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s[1].clamp(-1.0, 1.0)).collect();
    let bandwidth = [scott_bandwidth(&xs), scott_bandwidth(&ys)];
    let w = 2.0 / size as f64;
    let mut density = vec![0.0; size * size];
    for (x, y) in xs.iter().zip(&ys) {
        let mx = cell_masses(*x, bandwidth[0], size);
        let my = cell_masses(*y, bandwidth[1], size);
        for (iy, py) in my.iter().enumerate() {
            if *py == 0.0 {
                continue;
            }
            for (ix, px) in mx.iter().enumerate() {
                density[iy * size + ix] += px * py;
            }
        }
    }
    let scale = 1.0 / (samples.len() as f64 * w * w);
    density.iter_mut().for_each(|d| *d *= scale);
    Ok(DensityGrid {
        size,
        centers: (0..size).map(|i| -1.0 + w * (i as f64 + 0.5)).collect(),
        bandwidth,
        density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_at_origin() {
        let g = kde(&[[0.0, 0.0]; 10], 41).unwrap();
        assert_eq!(g.bandwidth, [BANDWIDTH_FLOOR; 2]);
        assert_eq!(g.local_maxima(), vec![(20, 20)]);
        for i in 0..41 {
            for j in 0..41 {
                assert!((g.at(i, j) - g.at(40 - i, j)).abs() < 1e-12);
                assert!((g.at(i, j) - g.at(j, i)).abs() < 1e-12);
            }
        }
        assert!((g.integral() - 1.0).abs() < 0.01);
    }

    #[test]
    fn needs_two_samples() {
        assert!(kde(&[[0.0, 0.0]], 11).is_err());
    }
}
