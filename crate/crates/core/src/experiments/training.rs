//! Two-stage construction of an expert bundle.
//!
//! Stage one fits the shared backbone together with a base expert on the
//! whole training pool. Stage two freezes the backbone and fine-tunes one
//! expert per disjoint slice. Independent bundles start every expert from
//! the base expert plus its own random perturbation; similar bundles start
//! them all from the base expert unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{training_slices, Semantics};
use crate::diffusion::{
    build_schedule, train_expert, Example, NoiseSchedule, Optimizer, TrainScope, TrainingConfig, TrainingLog,
};
use crate::engine::ExpertBundle;
use crate::error::{EmoeError, Result};
use crate::math::{mix64, RngStream};
use crate::text::{ExpertDescriptor, Prompt, TextEncoder};
use crate::unet::{Backbone, ExpertWeights, Geometry, UNetWeights};

/// Negative descriptor shared by every expert.
pub const NEGATIVE_DESCRIPTOR: &str = "blurry noise";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub experts: usize,
    pub top_n: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub pool_size: usize,
    pub batch_size: usize,
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub backbone_optimizer: Optimizer,
    pub expert_epochs: usize,
    pub expert_lr: f64,
    pub expert_optimizer: Optimizer,
    /// Std of the noise added to the base expert before fine-tuning.
    pub perturb_scale: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            experts: 4,
            top_n: 2,
            beta_min: 1e-4,
            beta_max: 0.1,
            pool_size: 480,
            batch_size: 16,
            backbone_epochs: 400,
            backbone_lr: 0.003,
            backbone_optimizer: Optimizer::Adam,
            expert_epochs: 150,
            expert_lr: 0.01,
            expert_optimizer: Optimizer::Adam,
            perturb_scale: 0.4,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(EmoeError::Config("experts must be >= 1".into()));
        }
        if self.top_n == 0 || self.top_n > self.experts {
            return Err(EmoeError::Config(format!(
                "top_n = {} must satisfy 1 <= top_n <= experts = {}",
                self.top_n, self.experts
            )));
        }
        if self.pool_size < self.experts {
            return Err(EmoeError::Config("pool_size must be at least the number of experts".into()));
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return Err(EmoeError::Config("perturb_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, g: &Geometry) -> Result<NoiseSchedule> {
        build_schedule(g.timesteps, self.beta_min, self.beta_max)
    }
}

/// Output of stage one.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub backbone: Backbone,
    pub base_expert: ExpertWeights,
    pub log: TrainingLog,
}

/// A trained expert and the slice-derived descriptor used for gating.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedExpert {
    pub weights: ExpertWeights,
    pub descriptor: ExpertDescriptor,
    pub log: TrainingLog,
}

/// The training pool encoded and partitioned into one slice per expert.
pub fn encoded_slices(g: &Geometry, plan: &TrainPlan, seed: u64) -> Result<Vec<Vec<Example>>> {
    let encoder = TextEncoder::new(g.d_txt, crate::text::DEFAULT_MAX_TOKENS);
    training_slices(g, plan.pool_size, plan.experts, seed)?
        .into_iter()
        .map(|slice| {
            slice
                .into_iter()
                .map(|(p, x0)| {
                    Ok(Example {
                        ctx: encoder.encode(&p)?,
                        x0,
                    })
                })
                .collect()
        })
        .collect()
}

/// Most frequent colour and shape in a slice, e.g. `"red circle"`.
pub fn slice_descriptor(g: &Geometry, plan: &TrainPlan, seed: u64, slice: usize) -> Result<ExpertDescriptor> {
    let slices = training_slices(g, plan.pool_size, plan.experts, seed)?;
    let prompts: Vec<&Prompt> = slices
        .get(slice)
        .ok_or_else(|| EmoeError::invalid(format!("slice {slice} out of range")))?
        .iter()
        .map(|(p, _)| p)
        .collect();
    describe(&prompts)
}

fn describe(prompts: &[&Prompt]) -> Result<ExpertDescriptor> {
    let mut colors: BTreeMap<String, usize> = BTreeMap::new();
    let mut shapes: BTreeMap<String, usize> = BTreeMap::new();
    for p in prompts {
        let s = Semantics::parse(p)?;
        *colors.entry(s.color).or_default() += 1;
        *shapes.entry(s.shape).or_default() += 1;
    }
    let top = |m: &BTreeMap<String, usize>| {
        m.iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .unwrap_or_default()
    };
    ExpertDescriptor::new(format!("{} {}", top(&colors), top(&shapes)), NEGATIVE_DESCRIPTOR)
}

fn stage_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

/// Stage one: backbone plus base expert on every slice.
pub fn train_base(g: &Geometry, plan: &TrainPlan, seed: u64) -> Result<BaseModel> {
    plan.validate()?;
    let schedule = plan.schedule(g)?;
    let all: Vec<Example> = encoded_slices(g, plan, seed)?.into_iter().flatten().collect();
    let mut model = UNetWeights::init(*g, 1, &mut RngStream::new(seed, 0xba5e))?;
    let config = TrainingConfig {
        epochs: plan.backbone_epochs,
        batch_size: plan.batch_size,
        learning_rate: plan.backbone_lr,
        seed: stage_seed(seed, 1),
        data_slice_id: u64::MAX,
        optimizer: plan.backbone_optimizer,
    };
    let log = train_expert(&config, &all, &mut model, &schedule, TrainScope::Full)?;
    Ok(BaseModel {
        backbone: model.backbone,
        base_expert: model.experts.remove(0),
        log,
    })
}

/// Stage two for one expert. `perturb` selects an independent start.
pub fn train_slice_expert(
    g: &Geometry,
    plan: &TrainPlan,
    base: &BaseModel,
    slices: &[Vec<Example>],
    slice: usize,
    seed: u64,
    perturb: bool,
) -> Result<TrainedExpert> {
    let data = slices
        .get(slice)
        .ok_or_else(|| EmoeError::invalid(format!("slice {slice} out of range")))?;
    let schedule = plan.schedule(g)?;
    let expert_seed = stage_seed(seed, 0x100 + slice as u64);
    let mut start = base.base_expert.clone();
    if perturb {
        start.perturb(&mut RngStream::new(expert_seed, 0x9e7), plan.perturb_scale);
    }
    let mut model = UNetWeights {
        geometry: *g,
        backbone: base.backbone.clone(),
        experts: vec![start],
    };
    let config = TrainingConfig {
        epochs: plan.expert_epochs,
        batch_size: plan.batch_size,
        learning_rate: plan.expert_lr,
        seed: expert_seed,
        data_slice_id: slice as u64,
        optimizer: plan.expert_optimizer,
    };
    let log = train_expert(&config, data, &mut model, &schedule, TrainScope::ExpertsOnly)?;
    Ok(TrainedExpert {
        weights: model.experts.remove(0),
        descriptor: slice_descriptor(g, plan, seed, slice)?,
        log,
    })
}

/// Trains every expert of a bundle on its own slice.
pub fn train_experts(g: &Geometry, plan: &TrainPlan, base: &BaseModel, seed: u64, perturb: bool) -> Result<Vec<TrainedExpert>> {
    use rayon::prelude::*;
    let slices = encoded_slices(g, plan, seed)?;
    (0..plan.experts)
        .into_par_iter()
        .map(|i| train_slice_expert(g, plan, base, &slices, i, seed, perturb))
        .collect()
}

/// Assembles a scoring bundle from trained parts.
pub fn assemble(g: &Geometry, plan: &TrainPlan, base: &BaseModel, experts: Vec<TrainedExpert>) -> Result<ExpertBundle> {
    let (weights, descriptors): (Vec<_>, Vec<_>) = experts.into_iter().map(|e| (e.weights, e.descriptor)).unzip();
    let model = UNetWeights {
        geometry: *g,
        backbone: base.backbone.clone(),
        experts: weights,
    };
    ExpertBundle::new(
        model,
        descriptors,
        TextEncoder::new(g.d_txt, crate::text::DEFAULT_MAX_TOKENS),
        plan.schedule(g)?,
        plan.top_n,
    )
}

/// Both stages end to end.
pub fn train_bundle(g: &Geometry, plan: &TrainPlan, seed: u64, perturb: bool) -> Result<ExpertBundle> {
    let base = train_base(g, plan, seed)?;
    let experts = train_experts(g, plan, &base, seed, perturb)?;
    assemble(g, plan, &base, experts)
}
