//! Expert separation, uncertainty estimation and rollouts.
//!
//! At `t = T` the denoiser is run once in separate-first mode, giving one
//! computational path per expert. The disagreement between the paths'
//! latents in the chosen space is the epistemic uncertainty; each path can
//! then be denoised to `t = 0` as an ordinary mixture of experts.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_step, LatentState, NoiseSchedule};
use crate::error::{EmoeError, Result};
use crate::math::{ensemble_mean_var, gaussian, RngStream, Tensor};
use crate::text::{ExpertDescriptor, Prompt, PromptEmbedding, TextEncoder};
use crate::unet::{unet_forward, ForwardMode, ForwardOutput, GateWeights, Gating, UNetWeights};

/// Representation in which expert disagreement is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    /// Mid-block output `m^post` (the default).
    MidPost,
    /// Mid-block input `m^pre`.
    MidPre,
    /// The per-path latents after one DDIM step, `z_{T-1}`.
    ZNext,
}

impl LatentSpace {
    pub const ALL: [LatentSpace; 3] = [LatentSpace::MidPost, LatentSpace::MidPre, LatentSpace::ZNext];

    pub fn as_str(self) -> &'static str {
        match self {
            LatentSpace::MidPost => "mid_post",
            LatentSpace::MidPre => "mid_pre",
            LatentSpace::ZNext => "z_next",
        }
    }
}

impl fmt::Display for LatentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LatentSpace {
    type Err = EmoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid_post" => Ok(LatentSpace::MidPost),
            "mid_pre" => Ok(LatentSpace::MidPre),
            "z_next" => Ok(LatentSpace::ZNext),
            other => Err(EmoeError::invalid(format!(
                "unknown latent space {other:?} (expected mid_post, mid_pre or z_next)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    /// Mean over dimensions of the across-expert population variance.
    pub eu: f64,
    /// `√d · eu`.
    pub reported: f64,
    pub space: LatentSpace,
    /// Dimensionality of the measured space.
    pub d_mid: usize,
}

impl UncertaintyEstimate {
    pub fn from_eu(eu: f64, space: LatentSpace, d_mid: usize) -> Self {
        Self {
            eu,
            reported: (d_mid as f64).sqrt() * eu,
            space,
            d_mid,
        }
    }
}

/// Mean over dimensions of the population variance across `members`.
pub fn eu_from_members(members: &[Tensor]) -> Result<f64> {
    let (_, var) = ensemble_mean_var(members)?;
    Ok(var.mean().max(0.0))
}

/// Builds an estimate from synthetic member latents; `d` is their size.
pub fn estimate_from_members(members: &[Tensor], space: LatentSpace) -> Result<UncertaintyEstimate> {
    let d = members.first().ok_or(EmoeError::Empty("ensemble members"))?.len();
    Ok(UncertaintyEstimate::from_eu(eu_from_members(members)?, space, d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmoeResult {
    pub estimate: UncertaintyEstimate,
    /// One final `z_0` per expert path.
    pub latents: Vec<Tensor>,
    /// `ε̂` of each path at the separation step.
    pub per_path_eps: Vec<Tensor>,
}

/// Estimates in every latent space from one separate-first pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationPass {
    pub z_t: LatentState,
    pub output: ForwardOutput,
    /// Per-path latents after one DDIM step.
    pub z_next: Vec<LatentState>,
}

impl SeparationPass {
    pub fn estimate(&self, space: LatentSpace) -> Result<UncertaintyEstimate> {
        let members: Vec<Tensor> = match space {
            LatentSpace::MidPost => self.output.mid.iter().map(|m| m.post.clone()).collect(),
            LatentSpace::MidPre => self.output.mid.iter().map(|m| m.pre.clone()).collect(),
            LatentSpace::ZNext => self.z_next.iter().map(|s| s.z.clone()).collect(),
        };
        estimate_from_members(&members, space)
    }
}

/// A trained ensemble ready for scoring: shared backbone, `M` experts, their
/// descriptors and the noise schedule they were trained under.
#[derive(Debug)]
pub struct ExpertBundle {
    weights: UNetWeights,
    descriptors: Vec<ExpertDescriptor>,
    encoder: TextEncoder,
    gating: Gating,
    schedule: NoiseSchedule,
    top_n: usize,
    forward_passes: AtomicU64,
}

impl Clone for ExpertBundle {
    fn clone(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            descriptors: self.descriptors.clone(),
            encoder: self.encoder,
            gating: self.gating.clone(),
            schedule: self.schedule.clone(),
            top_n: self.top_n,
            forward_passes: AtomicU64::new(0),
        }
    }
}

impl ExpertBundle {
    pub fn new(
        weights: UNetWeights,
        descriptors: Vec<ExpertDescriptor>,
        encoder: TextEncoder,
        schedule: NoiseSchedule,
        top_n: usize,
    ) -> Result<Self> {
        let m = weights.num_experts();
        if m == 0 {
            return Err(EmoeError::Empty("expert bundle"));
        }
        if descriptors.len() != m {
            return Err(EmoeError::invalid(format!(
                "{} descriptors for {m} experts",
                descriptors.len()
            )));
        }
        if top_n == 0 || top_n > m {
            return Err(EmoeError::invalid(format!("top_n = {top_n} must be in 1..={m}")));
        }
        if encoder.d_txt != weights.geometry.d_txt {
            return Err(EmoeError::dim(format!(
                "encoder d_txt {} vs model d_txt {}",
                encoder.d_txt, weights.geometry.d_txt
            )));
        }
        if schedule.steps() != weights.geometry.timesteps {
            return Err(EmoeError::dim(format!(
                "schedule has {} steps, model was built for {}",
                schedule.steps(),
                weights.geometry.timesteps
            )));
        }
        let gating = Gating::new(encoder, &descriptors)?;
        Ok(Self {
            weights,
            descriptors,
            encoder,
            gating,
            schedule,
            top_n,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn weights(&self) -> &UNetWeights {
        &self.weights
    }

    pub fn descriptors(&self) -> &[ExpertDescriptor] {
        &self.descriptors
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_experts(&self) -> usize {
        self.weights.num_experts()
    }

    pub fn top_n(&self) -> usize {
        self.top_n
    }

    /// Bundle restricted to the experts at `indices`. `top_n` is clamped to
    /// the new ensemble size.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let weights = self.weights.subset(indices)?;
        let descriptors = indices.iter().map(|&i| self.descriptors[i].clone()).collect();
        let top_n = self.top_n.min(indices.len());
        Self::new(weights, descriptors, self.encoder, self.schedule.clone(), top_n)
    }

    /// Number of denoiser evaluations performed so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    fn forward(&self, state: &LatentState, ctx: &PromptEmbedding, gates: &GateWeights, mode: ForwardMode) -> Result<ForwardOutput> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        unet_forward(&self.weights, state, ctx, gates, mode)
    }

    pub fn gates(&self, prompt: &Prompt) -> Result<GateWeights> {
        self.gating.weights(prompt, None, self.top_n)
    }

    /// The prompt's own random stream under `seed`.
    pub fn prompt_stream(prompt: &Prompt, seed: u64) -> RngStream {
        RngStream::new(seed, prompt.fingerprint())
    }

    /// The shared starting latent `z_T ~ N(0, I)` for `(prompt, seed)`.
    pub fn initial_latent(&self, prompt: &Prompt, seed: u64) -> Result<LatentState> {
        let mut stream = Self::prompt_stream(prompt, seed);
        let z = gaussian(&mut stream, &self.weights.geometry.latent_shape())?;
        Ok(LatentState::new(z, self.schedule.steps()))
    }

    /// One separate-first pass at `state`, plus one DDIM step per path.
    pub fn separate(&self, state: &LatentState, ctx: &PromptEmbedding, gates: &GateWeights) -> Result<SeparationPass> {
        let output = self.forward(state, ctx, gates, ForwardMode::SeparateFirst)?;
        let z_next = output
            .eps
            .iter()
            .map(|e| ddim_step(state, e, &self.schedule))
            .collect::<Result<Vec<_>>>()?;
        Ok(SeparationPass {
            z_t: state.clone(),
            output,
            z_next,
        })
    }

    /// Separate-first pass at `t = T` for `(prompt, seed)`.
    pub fn separation_pass(&self, prompt: &Prompt, seed: u64) -> Result<SeparationPass> {
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let z_t = self.initial_latent(prompt, seed)?;
        self.separate(&z_t, &ctx, &gates)
    }

    /// EU at the first denoising step. No denoising beyond that single pass.
    pub fn estimate_uncertainty(&self, prompt: &Prompt, seed: u64, space: LatentSpace) -> Result<UncertaintyEstimate> {
        self.separation_pass(prompt, seed)?.estimate(space)
    }

    /// All three spaces from the same single pass.
    pub fn estimate_all_spaces(&self, prompt: &Prompt, seed: u64) -> Result<Vec<UncertaintyEstimate>> {
        let pass = self.separation_pass(prompt, seed)?;
        LatentSpace::ALL.iter().map(|&s| pass.estimate(s)).collect()
    }

    /// Aggregate-mode DDIM from `state` down to `t = stop`.
    pub fn denoise(&self, mut state: LatentState, ctx: &PromptEmbedding, gates: &GateWeights, stop: usize) -> Result<LatentState> {
        while state.t > stop {
            let out = self.forward(&state, ctx, gates, ForwardMode::Aggregate)?;
            state = ddim_step(&state, &out.eps[0], &self.schedule)?;
        }
        Ok(state)
    }

    /// Continues each separated path independently to `t = 0`.
    pub fn continue_paths(&self, paths: Vec<LatentState>, ctx: &PromptEmbedding, gates: &GateWeights) -> Result<Vec<Tensor>> {
        paths
            .into_iter()
            .map(|p| Ok(self.denoise(p, ctx, gates, 0)?.z))
            .collect()
    }

    /// Separation at `t = T`, then an independent MoE rollout per path.
    pub fn emoe_rollout(&self, prompt: &Prompt, seed: u64, steps: usize, space: LatentSpace) -> Result<EmoeResult> {
        if steps != self.schedule.steps() {
            return Err(EmoeError::invalid(format!(
                "rollout requested {steps} steps but the schedule has {}",
                self.schedule.steps()
            )));
        }
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let z_t = self.initial_latent(prompt, seed)?;
        let pass = self.separate(&z_t, &ctx, &gates)?;
        let estimate = pass.estimate(space)?;
        let latents = self.continue_paths(pass.z_next, &ctx, &gates)?;
        Ok(EmoeResult {
            estimate,
            latents,
            per_path_eps: pass.output.eps,
        })
    }

    /// Plain aggregate MoE sampler from the seeded `z_T`.
    pub fn sample(&self, prompt: &Prompt, seed: u64) -> Result<Tensor> {
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let z_t = self.initial_latent(prompt, seed)?;
        Ok(self.denoise(z_t, &ctx, &gates, 0)?.z)
    }

    /// Uncertainty at the first step; halts when `reported ≥ threshold`,
    /// otherwise runs one aggregate rollout from the same `z_T`.
    pub fn fast_emoe(
        &self,
        prompt: &Prompt,
        seed: u64,
        space: LatentSpace,
        threshold: Option<f64>,
    ) -> Result<(UncertaintyEstimate, Option<Tensor>)> {
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let z_t = self.initial_latent(prompt, seed)?;
        let estimate = self.separate(&z_t, &ctx, &gates)?.estimate(space)?;
        if threshold.is_some_and(|th| estimate.reported >= th) {
            return Ok((estimate, None));
        }
        let z0 = self.denoise(z_t, &ctx, &gates, 0)?;
        Ok((estimate, Some(z0.z)))
    }

    /// Aggregate denoising from `T` down to `t`, then separation at `t`.
    pub fn estimate_at_step(&self, prompt: &Prompt, seed: u64, t: usize, space: LatentSpace) -> Result<UncertaintyEstimate> {
        let steps = self.schedule.steps();
        if t == 0 || t > steps {
            return Err(EmoeError::TimestepRange { t, steps });
        }
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let z_t = self.denoise(self.initial_latent(prompt, seed)?, &ctx, &gates, t)?;
        self.separate(&z_t, &ctx, &gates)?.estimate(space)
    }

    /// EU at every step of one aggregate rollout, from `t = T` down to 1.
    /// Each entry comes from one separate pass at that step's latent.
    pub fn step_series(&self, prompt: &Prompt, seed: u64, space: LatentSpace) -> Result<Vec<(usize, UncertaintyEstimate)>> {
        let ctx = self.encoder.encode(prompt)?;
        let gates = self.gates(prompt)?;
        let mut state = self.initial_latent(prompt, seed)?;
        let mut series = Vec::with_capacity(self.schedule.steps());
        while state.t > 0 {
            series.push((state.t, self.separate(&state, &ctx, &gates)?.estimate(space)?));
            state = self.denoise(state.clone(), &ctx, &gates, state.t - 1)?;
        }
        Ok(series)
    }
}

/// Identity codec: the latent is the image.
pub fn decode(z0: &LatentState) -> Result<Tensor> {
    if z0.t != 0 {
        return Err(EmoeError::invalid(format!("decode expects t = 0, got t = {}", z0.t)));
    }
    Ok(z0.z.clone())
}

/// Inverse of [`decode`].
pub fn encode(x: &Tensor) -> LatentState {
    LatentState::new(x.clone(), 0)
}
