use serde::{Deserialize, Serialize};

use super::{corrupt, NoiseSchedule};
use crate::error::{EmoeError, Result};
use crate::math::{gaussian, RngStream, Tensor};
use crate::text::PromptEmbedding;
use crate::unet::{accumulate_grad, unet_forward, ForwardMode, GateWeights, Params, UNetWeights};
use crate::diffusion::{ldm_loss, LatentState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Which data slice this run sees; also separates the minibatch streams
    /// of runs that share a seed.
    pub data_slice_id: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

/// Update rule applied to each minibatch gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999) and ε = 1e-8.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: UNetWeights,
    v: UNetWeights,
    step: i32,
}

impl AdamState {
    fn new(model: &UNetWeights) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut UNetWeights, grads: &UNetWeights, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(EmoeError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EmoeError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EmoeError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which parameters an optimisation run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Backbone and experts.
    Full,
    /// Experts only; the shared backbone stays frozen.
    ExpertsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// One training pair: an encoded prompt and a clean latent.
#[derive(Debug, Clone)]
pub struct Example {
    pub ctx: PromptEmbedding,
    pub x0: Tensor,
}

fn shuffle(stream: &mut RngStream, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.range(0, i + 1);
        order.swap(i, j);
    }
    order
}

/// Minibatch SGD on the noise-prediction loss with `t ~ U{1..T}`. Every
/// expert in `model` is routed with uniform weight.
pub fn train_expert(
    config: &TrainingConfig,
    data: &[Example],
    model: &mut UNetWeights,
    schedule: &NoiseSchedule,
    scope: TrainScope,
) -> Result<TrainingLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(EmoeError::Empty("training slice"));
    }
    let gates = GateWeights::uniform(model.num_experts());
    let mut stream = RngStream::new(config.seed, config.data_slice_id);
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| AdamState::new(model));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffle(&mut stream, data.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &data[i];
                let t = stream.range(1, schedule.steps() + 1);
                let eps = gaussian(&mut stream, ex.x0.shape())?;
                let zt = LatentState::new(corrupt(&ex.x0, &eps, t, schedule)?, t);
                batch_loss += accumulate_grad(model, &zt, &ex.ctx, &gates, &eps, scale, &mut grads)?;
            }
            let batch_loss = batch_loss * scale;
            if !batch_loss.is_finite() {
                return Err(EmoeError::Diverged { epoch });
            }
            if scope == TrainScope::ExpertsOnly {
                for t in grads.backbone.tensors_mut() {
                    t.data_mut().fill(0.0);
                }
            }
            match adam.as_mut() {
                Some(state) => state.apply(model, &grads, config.learning_rate),
                None => model.add_scaled(-config.learning_rate, &grads),
            }
            if !model.tensors().iter().all(|t| t.is_finite()) {
                return Err(EmoeError::Diverged { epoch });
            }
            total += batch_loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(EmoeError::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainingLog { epoch_losses })
}

/// Mean loss over `draws` fixed `(t, ε)` draws per example.
pub fn evaluate_loss(
    model: &UNetWeights,
    data: &[Example],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(EmoeError::Empty("evaluation set"));
    }
    let gates = GateWeights::uniform(model.num_experts());
    let mut stream = RngStream::new(seed, 0xe7a1);
    let mut total = 0.0;
    for ex in data {
        for _ in 0..draws {
            let t = stream.range(1, schedule.steps() + 1);
            let eps = gaussian(&mut stream, ex.x0.shape())?;
            let zt = LatentState::new(corrupt(&ex.x0, &eps, t, schedule)?, t);
            let out = unet_forward(model, &zt, &ex.ctx, &gates, ForwardMode::Aggregate)?;
            total += ldm_loss(&eps, &out.eps[0])?;
        }
    }
    Ok(total / (data.len() * draws) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::text::{Prompt, TextEncoder};
    use crate::unet::Geometry;

    fn setup() -> (Vec<Example>, UNetWeights, NoiseSchedule) {
        let g = Geometry::default();
        let enc = TextEncoder::default();
        let mut s = RngStream::new(21, 0);
        let data = ["a red square", "a blue ring big", "a green dot left"]
            .iter()
            .map(|p| Example {
                ctx: enc.encode(&Prompt::english(*p).unwrap()).unwrap(),
                x0: gaussian(&mut s, &g.latent_shape()).unwrap().scale(0.5),
            })
            .collect();
        let w = UNetWeights::init(g, 2, &mut s).unwrap();
        (data, w, build_schedule(g.timesteps, 1e-4, 0.1).unwrap())
    }

    fn config(epochs: usize, lr: f64, optimizer: Optimizer) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: 2,
            learning_rate: lr,
            seed: 4,
            data_slice_id: 1,
            optimizer,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (data, w, s) = setup();
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let mut m = w.clone();
            let log = train_expert(&config(2, 0.0, opt), &data, &mut m, &s, TrainScope::Full).unwrap();
            assert_eq!(m, w);
            assert_eq!(log.epoch_losses.len(), 2);
        }
    }

    #[test]
    fn adam_fits_a_tiny_set() {
        let (data, mut w, s) = setup();
        let before = evaluate_loss(&w, &data, &s, 8, 1).unwrap();
        train_expert(&config(150, 0.01, Optimizer::Adam), &data, &mut w, &s, TrainScope::Full).unwrap();
        let after = evaluate_loss(&w, &data, &s, 8, 1).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let (data, w, s) = setup();
        let mut a = w.clone();
        let mut b = w.clone();
        let la = train_expert(&config(3, 0.01, Optimizer::Sgd), &data, &mut a, &s, TrainScope::Full).unwrap();
        let lb = train_expert(&config(3, 0.01, Optimizer::Sgd), &data, &mut b, &s, TrainScope::Full).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn experts_only_freezes_the_backbone() {
        let (data, w, s) = setup();
        let mut m = w.clone();
        train_expert(&config(2, 0.01, Optimizer::Adam), &data, &mut m, &s, TrainScope::ExpertsOnly).unwrap();
        assert_eq!(m.backbone, w.backbone);
        assert_ne!(m.experts, w.experts);
    }

    #[test]
    fn divergence_and_bad_configs_are_errors() {
        let (data, mut w, s) = setup();
        assert!(train_expert(&config(0, 0.1, Optimizer::Sgd), &data, &mut w, &s, TrainScope::Full).is_err());
        assert!(train_expert(&config(1, f64::NAN, Optimizer::Sgd), &data, &mut w, &s, TrainScope::Full).is_err());
        assert!(train_expert(&config(1, 0.1, Optimizer::Sgd), &[], &mut w, &s, TrainScope::Full).is_err());
        assert!(train_expert(&config(5, 1e12, Optimizer::Sgd), &data, &mut w, &s, TrainScope::Full).is_err());
    }
}
