//! Epistemic uncertainty for a mixture-of-experts latent diffusion model.
//!
//! The crate trains a toy conditional U-Net whose cross-attention and
//! feed-forward layers are sparse mixtures of experts, then measures
//! disagreement between the experts at the first denoising step. Experts are
//! split into separate computational paths at the first down-block
//! cross-attention; the per-dimension variance of their mid-block latents,
//! averaged over dimensions, is the uncertainty estimate.

pub mod cli;
pub mod data;
pub mod engine;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod math;
pub mod text;
pub mod unet;

pub use error::{EmoeError, Result};
