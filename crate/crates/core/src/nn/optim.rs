use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. When `quantize` is set the parameters are
/// rounded back onto the `f32` grid afterwards.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    quantize: bool,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Length {
            context: "adam parameter count".into(),
            left: params.len(),
            right: grads.len(),
        });
    }
    for i in 0..params.len() {
        if grads.get(i).shape() != params.by_index(i).shape() {
            return Err(Error::shape(
                format!("adam gradient `{}`", params.name_of(i)),
                params.by_index(i).shape(),
                grads.get(i).shape(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.get(i).data();
        let m = state.m[i].data_mut();
        for (mm, gg) in m.iter_mut().zip(g) {
            *mm = cfg.beta1 * *mm + (1.0 - cfg.beta1) * gg;
        }
        let v = state.v[i].data_mut();
        for (vv, gg) in v.iter_mut().zip(g) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gg * gg;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        let p = params.by_index_mut(i).data_mut();
        for ((pp, mm), vv) in p.iter_mut().zip(m).zip(v) {
            let mhat = mm / bc1;
            let vhat = vv / bc2;
            *pp -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            if quantize {
                *pp = *pp as f32 as f64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(store: &ParameterStore, g: f64) -> Gradients {
        let mut gr = Gradients::zeros_like(store);
        gr.get_mut(0).data_mut()[0] = g;
        gr
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        let g = grad(&s, 0.0);
        adam_step(&mut s, &g, &mut st, &AdamConfig::default(), false).unwrap();
        assert_eq!(s.by_index(0).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = scalar_store(1.0);
            let mut st = AdamState::new(&s);
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            let gr = grad(&s, g);
            adam_step(&mut s, &gr, &mut st, &cfg, false).unwrap();
            let delta = s.by_index(0).data()[0] - 1.0;
            assert!(delta * g < 0.0);
            // m̂ = g, v̂ = g², so |Δ| = lr·|g|/(|g|+eps)
            assert!((delta.abs() - 0.01 * g.abs() / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_trace() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let (g1, g2) = (grad(&s, 1.0), grad(&s, -2.0));
        adam_step(&mut s, &g1, &mut st, &cfg, false).unwrap();
        adam_step(&mut s, &g2, &mut st, &cfg, false).unwrap();
        // step 1: m=0.1, v=0.001, m̂=1, v̂=1 → p = -0.1/(1+1e-8)
        // step 2: m=0.09-0.2=-0.11, v=0.000999+0.004=0.004999
        //         m̂=-0.11/0.19, v̂=0.004999/0.001999
        let p1 = -0.1 / (1.0 + 1e-8);
        let mhat: f64 = -0.11 / (1.0 - 0.81);
        let vhat: f64 = (0.999 * 0.001 + 0.001 * 4.0) / (1.0 - 0.999f64.powi(2));
        let p2 = p1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((st.m[0].data()[0] + 0.11).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.004999).abs() < 1e-15);
        assert!((s.by_index(0).data()[0] - p2).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut s = scalar_store(0.0);
        let other = {
            let mut o = ParameterStore::new();
            o.insert("p", Tensor::zeros(&[2])).unwrap();
            o
        };
        let mut st = AdamState::new(&s);
        let g = Gradients::zeros_like(&other);
        assert!(adam_step(&mut s, &g, &mut st, &AdamConfig::default(), false).is_err());
    }
}
