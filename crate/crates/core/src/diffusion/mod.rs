//! Noise schedule, forward corruption, the DDIM reverse step and the
//! noise-prediction loss.
//!
//! The autoencoder is an identity codec, so every function here works
//! directly on latents.

mod train;

pub use train::{evaluate_loss, train_expert, Example, Optimizer, TrainScope, TrainingConfig, TrainingLog};

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::math::{gaussian, RngStream, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Schedule from an explicit beta sequence. The sequence must be
    /// strictly increasing inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(EmoeError::Empty("beta sequence"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(EmoeError::invalid("every beta must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EmoeError::invalid("betas must be strictly increasing"));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }
}

/// Linearly spaced betas from `beta_min` to `beta_max` over `steps` steps.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(EmoeError::invalid(format!("T must be at least 2, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(EmoeError::invalid(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let span = beta_max - beta_min;
    let last = (steps - 1) as f64;
    let betas = (0..steps)
        .map(|i| beta_min + span * i as f64 / last)
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// A latent `z_t` tagged with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Tensor, t: usize) -> Self {
        Self { z, t }
    }
}

/// One Markov step `z_t ~ N(√(1-β_t) z_{t-1}, β_t I)`.
pub fn forward_step(
    prev: &LatentState,
    schedule: &NoiseSchedule,
    stream: &mut RngStream,
) -> Result<LatentState> {
    let steps = schedule.steps();
    if prev.t >= steps {
        return Err(EmoeError::ChainExhausted { t: prev.t, steps });
    }
    let t = prev.t + 1;
    let beta = schedule.beta(t);
    let noise = gaussian(stream, prev.z.shape())?;
    let keep = (1.0 - beta).sqrt();
    let spread = beta.sqrt();
    let z = prev.z.zip_map(&noise, |z, e| keep * z + spread * e)?;
    Ok(LatentState::new(z, t))
}

/// Closed-form marginal `z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε`; returns `ε` as well.
pub fn forward_marginal(
    z0: &LatentState,
    t: usize,
    schedule: &NoiseSchedule,
    stream: &mut RngStream,
) -> Result<(LatentState, Tensor)> {
    let eps = gaussian(stream, z0.z.shape())?;
    let zt = corrupt(&z0.z, &eps, t, schedule)?;
    Ok((LatentState::new(zt, t), eps))
}

/// Deterministic half of [`forward_marginal`] for a given `ε`.
pub fn corrupt(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let steps = schedule.steps();
    if t == 0 || t > steps {
        return Err(EmoeError::TimestepRange { t, steps });
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    z0.zip_map(eps, |z, e| signal * z + noise * e)
}

/// Predicted clean latent `ẑ_0 = (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(state: &LatentState, eps_pred: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let steps = schedule.steps();
    if state.t == 0 || state.t > steps {
        return Err(EmoeError::TimestepRange { t: state.t, steps });
    }
    let ab = schedule.alpha_bar(state.t);
    let noise = (1.0 - ab).sqrt();
    let signal = ab.sqrt();
    state.z.zip_map(eps_pred, |z, e| (z - noise * e) / signal)
}

/// Deterministic DDIM update (η = 0) from `t` to `t-1`.
pub fn ddim_step(
    state: &LatentState,
    eps_pred: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let x0 = predict_x0(state, eps_pred, schedule)?;
    let prev = schedule.alpha_bar(state.t - 1);
    let signal = prev.sqrt();
    let noise = (1.0 - prev).sqrt();
    let z = x0.zip_map(eps_pred, |x, e| signal * x + noise * e)?;
    Ok(LatentState::new(z, state.t - 1))
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    if !eps.same_shape(eps_pred) {
        return Err(EmoeError::dim(format!(
            "loss: eps {:?} vs eps_pred {:?}",
            eps.shape(),
            eps_pred.shape()
        )));
    }
    let n = eps.len() as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gradient of [`ldm_loss`] with respect to `eps_pred`.
pub fn ldm_loss_grad(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    let n = eps.len() as f64;
    eps_pred.zip_map(eps, |p, e| 2.0 * (p - e) / n)
}
