//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use layers::{BatchNorm, Linear, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Elementwise `max(0, v)`.
pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}
