//! Brute-force references and the randomized sweeps built on them.

use multigail::discriminators::style_reward;
use multigail::eval::{chi2, js, kl, wasserstein1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force references, written out term by term.
pub mod oracle {
    pub const EPS: f64 = 1e-8;

    pub fn smoothed(p: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = p.iter().map(|x| x + EPS).collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|x| x / z).collect()
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        let (p, q) = (smoothed(p), smoothed(q));
        let mut s = 0.0;
        for i in 0..p.len() {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
        s
    }

    pub fn js(p: &[f64], q: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            let m = (p[i] + q[i]) / 2.0;
            if p[i] > 0.0 {
                s += 0.5 * p[i] * (p[i] / m).ln();
            }
            if q[i] > 0.0 {
                s += 0.5 * q[i] * (q[i] / m).ln();
            }
        }
        s
    }

    pub fn chi2(p: &[f64], q: &[f64]) -> f64 {
        let (p, q) = (smoothed(p), smoothed(q));
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - q[i]).powi(2) / q[i];
        }
        s
    }

    /// Optimal transport on a line by the north-west corner rule: move
    /// mass greedily from the leftmost remaining source bin to the
    /// leftmost remaining sink bin and pay distance × mass.
    pub fn w1(p: &[f64], q: &[f64], width: f64) -> f64 {
        let (mut a, mut b) = (p.to_vec(), q.to_vec());
        let (mut i, mut j, mut cost) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            let m = a[i].min(b[j]);
            cost += m * (i as f64 - j as f64).abs() * width;
            a[i] -= m;
            b[j] -= m;
            if a[i] <= 1e-15 {
                i += 1;
            }
            if b[j] <= 1e-15 {
                j += 1;
            }
        }
        cost
    }
}

fn draw(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..8)
        .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    let s: f64 = v.iter().sum();
    if s == 0.0 {
        vec![0.125; 8]
    } else {
        v.iter().map(|x| x / s).collect()
    }
}

/// Largest relative deviation from the references over `pairs` random
/// sparse 8-bin pairs. Panics when JS leaves `[0, ln 2]` or a metric of a
/// histogram against itself is not exactly zero.
pub fn divergence_equivalence(pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let checks = [
            (kl(&p, &q).unwrap(), oracle::kl(&p, &q)),
            (js(&p, &q).unwrap(), oracle::js(&p, &q)),
            (chi2(&p, &q).unwrap(), oracle::chi2(&p, &q)),
            (wasserstein1(&p, &q, 0.25).unwrap(), oracle::w1(&p, &q, 0.25)),
        ];
        // χ² reaches ~1e6 when a smoothed empty bin is the denominator
        for (a, b) in checks {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        let j = js(&p, &q).unwrap();
        assert!((0.0..=std::f64::consts::LN_2).contains(&j), "js {j}");
        for v in [kl(&p, &p), js(&p, &p), chi2(&p, &p), wasserstein1(&p, &p, 0.25)] {
            assert_eq!(v.unwrap(), 0.0, "{p:?}");
        }
    }
    worst
}

/// Bounds and homogeneity of the style reward over `draws` random
/// (scores, α) pairs. Scaling α by a power of two must reproduce the
/// reward bit for bit; any other positive factor is compared relatively,
/// and the largest such deviation is returned.
pub fn style_reward_draws(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let n = rng.gen_range(1..=5);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let r = style_reward(&scores, &alpha).unwrap();
        assert!(
            r >= 0.0 && r <= alpha.iter().sum::<f64>(),
            "{scores:?} {alpha:?} -> {r}"
        );
        let c = 2f64.powi(rng.gen_range(-20..=20));
        let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();
        assert_eq!(style_reward(&scores, &scaled).unwrap(), c * r);
        let g: f64 = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = alpha.iter().map(|a| a * g).collect();
        let dev = (style_reward(&scores, &scaled).unwrap() - g * r).abs() / (g * r).max(1e-300);
        if r > 0.0 {
            worst = worst.max(dev);
        }
    }
    worst
}
