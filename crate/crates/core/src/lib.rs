//! MultiGAIL: one policy conditioned on an auxiliary style vector, trained
//! against one adversarial discriminator per demonstrated persona.

pub mod config;
pub mod discriminators;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experts;
pub mod nn;
pub mod parallel;
pub mod policy;
pub mod ppo;
pub mod trainer;

pub use error::{Error, Result};
