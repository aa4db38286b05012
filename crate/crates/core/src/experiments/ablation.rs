//! Ablation sweeps: ensemble size, denoising step, latent space and a
//! bundle of similar experts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Split};
use super::stats::{welch_t_test, TrendTestResult};
use crate::engine::{ExpertBundle, LatentSpace};
use crate::error::{EmoeError, Result};
use crate::text::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seed: u64,
    pub space: LatentSpace,
    /// Prompts per split used for the per-step series.
    pub step_prompts: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: LatentSpace::MidPost,
            step_prompts: 16,
        }
    }
}

/// Mean reported uncertainty of `ood_remap` against `in_dist` prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub in_dist_mean: f64,
    pub ood_mean: f64,
    pub welch: TrendTestResult,
}

impl Separation {
    pub fn from_samples(in_dist: &[f64], ood: &[f64]) -> Result<Self> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            in_dist_mean: mean(in_dist),
            ood_mean: mean(ood),
            welch: welch_t_test(ood, in_dist)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub experts: Vec<usize>,
    pub separation: Separation,
}

/// Results of every subset of one size, averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub size: usize,
    pub subsets: usize,
    pub in_dist_mean: f64,
    pub ood_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPoint {
    pub t: usize,
    pub in_dist_mean: f64,
    pub ood_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceResult {
    pub space: LatentSpace,
    pub separation: Separation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub subsets: Vec<SubsetResult>,
    pub sizes: Vec<SizeSummary>,
    pub steps: Vec<StepPoint>,
    pub spaces: Vec<SpaceResult>,
    pub similar: Option<Separation>,
}

/// Every subset of `0..m` with size in `2..m`, then the full set. For
/// `m = 4` that is 6 + 4 + 1 = 11 subsets.
pub fn ensemble_subsets(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 2..m {
        let mut pick: Vec<usize> = (0..size).collect();
        loop {
            out.push(pick.clone());
            // advance to the next combination in lexicographic order
            let Some(i) = (0..size).rev().find(|&i| pick[i] < m - size + i) else {
                break;
            };
            pick[i] += 1;
            for j in i + 1..size {
                pick[j] = pick[j - 1] + 1;
            }
        }
    }
    out.push((0..m).collect());
    out
}

fn prompts(corpus: &Corpus, split: Split) -> Vec<&Prompt> {
    corpus.split(split).map(|e| &e.prompt).collect()
}

fn reported(bundle: &ExpertBundle, prompts: &[&Prompt], seed: u64, space: LatentSpace) -> Result<Vec<f64>> {
    prompts
        .par_iter()
        .map(|p| Ok(bundle.estimate_uncertainty(p, seed, space)?.reported))
        .collect()
}

/// In-dist vs OOD separation of a bundle at the first step.
pub fn separation(bundle: &ExpertBundle, corpus: &Corpus, seed: u64, space: LatentSpace) -> Result<Separation> {
    let in_dist = reported(bundle, &prompts(corpus, Split::InDist), seed, space)?;
    let ood = reported(bundle, &prompts(corpus, Split::OodRemap), seed, space)?;
    Separation::from_samples(&in_dist, &ood)
}

pub fn subset_sweep(bundle: &ExpertBundle, corpus: &Corpus, config: &AblationConfig) -> Result<Vec<SubsetResult>> {
    ensemble_subsets(bundle.num_experts())
        .into_iter()
        .map(|experts| {
            let sub = bundle.subset(&experts)?;
            Ok(SubsetResult {
                separation: separation(&sub, corpus, config.seed, config.space)?,
                experts,
            })
        })
        .collect()
}

pub fn size_summaries(subsets: &[SubsetResult]) -> Vec<SizeSummary> {
    let mut sizes: Vec<usize> = subsets.iter().map(|s| s.experts.len()).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let group: Vec<&SubsetResult> = subsets.iter().filter(|s| s.experts.len() == size).collect();
            let n = group.len() as f64;
            SizeSummary {
                size,
                subsets: group.len(),
                in_dist_mean: group.iter().map(|s| s.separation.in_dist_mean).sum::<f64>() / n,
                ood_mean: group.iter().map(|s| s.separation.ood_mean).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Mean reported uncertainty at every denoising step for the first
/// `step_prompts` prompts of each split.
pub fn step_sweep(bundle: &ExpertBundle, corpus: &Corpus, config: &AblationConfig) -> Result<Vec<StepPoint>> {
    let series = |split| -> Result<Vec<Vec<(usize, f64)>>> {
        prompts(corpus, split)
            .into_iter()
            .take(config.step_prompts)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|p| {
                Ok(bundle
                    .step_series(p, config.seed, config.space)?
                    .into_iter()
                    .map(|(t, e)| (t, e.reported))
                    .collect())
            })
            .collect()
    };
    let in_dist = series(Split::InDist)?;
    let ood = series(Split::OodRemap)?;
    if in_dist.is_empty() || ood.is_empty() {
        return Err(EmoeError::Empty("step sweep prompts"));
    }
    let mean_at = |s: &[Vec<(usize, f64)>], i: usize| s.iter().map(|v| v[i].1).sum::<f64>() / s.len() as f64;
    Ok((0..in_dist[0].len())
        .map(|i| StepPoint {
            t: in_dist[0][i].0,
            in_dist_mean: mean_at(&in_dist, i),
            ood_mean: mean_at(&ood, i),
        })
        .collect())
}

/// All three latent spaces, each prompt scored by one separation pass.
pub fn space_sweep(bundle: &ExpertBundle, corpus: &Corpus, seed: u64) -> Result<Vec<SpaceResult>> {
    let all = |split| -> Result<Vec<Vec<f64>>> {
        prompts(corpus, split)
            .par_iter()
            .map(|p| Ok(bundle.estimate_all_spaces(p, seed)?.iter().map(|e| e.reported).collect()))
            .collect()
    };
    let in_dist = all(Split::InDist)?;
    let ood = all(Split::OodRemap)?;
    LatentSpace::ALL
        .iter()
        .enumerate()
        .map(|(i, &space)| {
            let a: Vec<f64> = in_dist.iter().map(|v| v[i]).collect();
            let b: Vec<f64> = ood.iter().map(|v| v[i]).collect();
            Ok(SpaceResult {
                space,
                separation: Separation::from_samples(&a, &b)?,
            })
        })
        .collect()
}

pub fn run_ablations(
    bundle: &ExpertBundle,
    similar: Option<&ExpertBundle>,
    corpus: &Corpus,
    config: &AblationConfig,
) -> Result<AblationReport> {
    let subsets = subset_sweep(bundle, corpus, config)?;
    Ok(AblationReport {
        sizes: size_summaries(&subsets),
        subsets,
        steps: step_sweep(bundle, corpus, config)?,
        spaces: space_sweep(bundle, corpus, config.seed)?,
        similar: similar
            .map(|b| separation(b, corpus, config.seed, config.space))
            .transpose()?,
    })
}
