//! Minimal reverse-mode differentiation and the networks built on it.

pub mod checkpoint;
pub mod network;
pub mod optim;
pub mod params;
pub mod penalty;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use network::{
    ActionDistribution, ArchitectureMode, EncoderBatch, ForwardPass, Network, NetworkConfig, NetworkRole, SampledAction,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParameterStore};
pub use penalty::gradient_penalty;
pub use tape::{GradientTape, Var};
pub use tensor::Tensor;
