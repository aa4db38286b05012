//! Toy conditional U-Net with sparse MoE cross-attention and feed-forward
//! layers, plus the training-free gate.

mod gating;
mod layers;
mod model;
mod weights;

pub use gating::{compute_gate_weights, gate_from_scores, GateWeights, Gating};
pub use layers::{moe_cross_attention, moe_feed_forward, AttnMode, CrossAttnOutput};
pub use model::{
    accumulate_grad, loss_and_grad, patchify, unet_forward, unpatchify, ForwardMode, ForwardOutput, MidLatent,
};
pub use weights::{
    AttnLayer, Backbone, CrossAttnWeights, ExpertWeights, FfLayer, Geometry, Linear, Mlp, Params, UNetWeights,
};
