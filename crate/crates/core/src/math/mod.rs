//! Numerical primitives shared by every other module.

mod ops;
mod rng;
mod tensor;

pub use ops::{attention, attention_backward, ensemble_mean_var, softmax, AttentionGrads, AttentionOutput};
pub use rng::{gaussian, mix64, RngStream};
pub use tensor::Tensor;
