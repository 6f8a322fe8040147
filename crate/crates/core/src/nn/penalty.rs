//! Squared input-gradient penalty of a discriminator head.
//!
//! With leaky-ReLU hidden layers the gradient of the score with respect to
//! the fused embedding is the linear chain
//! `W1 · diag(m1) · W2 · diag(m2) · w3`, where the masks `m` are the
//! activation slopes at the sample. The masks are piecewise constant, so the
//! penalty is recorded as that chain with frozen masks and differentiates
//! only into the head weights.

use super::network::{Network, NetworkRole, LEAKY_SLOPE};
use super::params::ParameterStore;
use super::tape::{GradientTape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn slopes(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&z| if z > 0.0 { 1.0 } else { LEAKY_SLOPE }).collect()
}

/// Records `(1/rows) Σ ||∇_φ D||²` over the first `rows` rows of a
/// discriminator forward pass and returns the scalar node.
pub fn record_gradient_penalty(tape: &mut GradientTape, z1: Var, z2: Var, rows: usize) -> Result<Var> {
    if rows == 0 {
        return Err(Error::Usage("gradient penalty over zero rows".into()));
    }
    let h = tape.value(z1).cols();
    let m1 = slopes(&tape.value(z1).data()[..rows * h]);
    let m2 = slopes(&tape.value(z2).data()[..rows * tape.value(z2).cols()]);
    let w1 = tape.param("head.h0.w")?;
    let w2 = tape.param("head.h1.w")?;
    let w3 = tape.param("head.out.w")?;
    let w3_row = tape.reshape(w3, vec![1, tape.value(w3).len()])?;
    let u2 = tape.broadcast_rows(w3_row, rows)?;
    let u2 = tape.mul_const(u2, m2)?;
    let u1 = tape.matmul_nt(u2, w2)?;
    let u1 = tape.mul_const(u1, m1)?;
    let grad = tape.matmul_nt(u1, w1)?;
    let sq = tape.sum_squares(grad)?;
    tape.scale(sq, 1.0 / rows as f64)
}

/// Gradient penalty of a discriminator at the given fused embeddings
/// (`[rows, 3d]`).
pub fn gradient_penalty(net: &Network, params: &ParameterStore, features: &Tensor) -> Result<f64> {
    if net.role != NetworkRole::Discriminator {
        return Err(Error::Usage("gradient penalty needs a discriminator".into()));
    }
    let width = net.config.embedding_width();
    if features.cols() != width {
        return Err(Error::shape(
            "penalty features",
            &[features.rows(), width],
            features.shape(),
        ));
    }
    let mut tape = GradientTape::new(params);
    let x = tape.constant(features.clone())?;
    let fp = net.head(&mut tape, x)?;
    let (z1, z2) = fp.disc_pre.expect("discriminator head records pre-activations");
    let p = record_gradient_penalty(&mut tape, z1, z2, features.rows())?;
    Ok(tape.value(p).data()[0])
}
