//! Command implementations. Each returns data; printing and exit codes are
//! left to the binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{backbone_checkpoint, backbone_path, expert_checkpoint, expert_path, load_backbone, load_expert};
use super::config::RunConfig;
use crate::diffusion::TrainingLog;
use crate::engine::{ExpertBundle, LatentSpace, UncertaintyEstimate};
use crate::error::Result;
use crate::experiments::ablation::{run_ablations, AblationReport};
use crate::experiments::corpus::make_corpus;
use crate::experiments::gp::{gp_convergence_probe, loglog_slope, median_rows, GpProbeRow};
use crate::experiments::report::{run_experiment, write_json, write_report, ExperimentReport};
use crate::experiments::training::{assemble, train_base, train_experts, BaseModel, TrainPlan};
use crate::math::Tensor;
use crate::text::{ExpertDescriptor, Prompt, TextEncoder, DEFAULT_MAX_TOKENS};
use crate::unet::UNetWeights;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_HALT: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub files: Vec<PathBuf>,
    pub backbone_final_loss: Option<f64>,
    pub expert_final_losses: Vec<Option<f64>>,
}

/// Trains the backbone and every expert, writing `backbone.emoe` and one
/// `expert_<i>.emoe` per expert.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(&dir)?;
    let g = &cfg.geometry;
    let base = train_base(g, &cfg.train, cfg.seed)?;
    let experts = train_experts(g, &cfg.train, &base, cfg.seed, true)?;
    let mut files = vec![backbone_path(&dir)];
    backbone_checkpoint(g, &base.backbone, &base.base_expert).save(&files[0])?;
    for (i, e) in experts.iter().enumerate() {
        let path = expert_path(&dir, i);
        expert_checkpoint(g, &e.weights, &e.descriptor).save(&path)?;
        files.push(path);
    }
    let summary = TrainSummary {
        files,
        backbone_final_loss: base.log.epoch_losses.last().copied(),
        expert_final_losses: experts.iter().map(|e| e.log.epoch_losses.last().copied()).collect(),
    };
    Ok(summary)
}

pub fn load_base(cfg: &RunConfig) -> Result<BaseModel> {
    let (backbone, base_expert) = load_backbone(&backbone_path(&cfg.checkpoint_dir()), &cfg.geometry)?;
    Ok(BaseModel {
        backbone,
        base_expert,
        log: TrainingLog { epoch_losses: Vec::new() },
    })
}

fn bundle_from(cfg: &RunConfig, plan: &TrainPlan, base: &BaseModel, experts: Vec<(crate::unet::ExpertWeights, ExpertDescriptor)>) -> Result<ExpertBundle> {
    let (weights, descriptors): (Vec<_>, Vec<_>) = experts.into_iter().unzip();
    ExpertBundle::new(
        UNetWeights {
            geometry: cfg.geometry,
            backbone: base.backbone.clone(),
            experts: weights,
        },
        descriptors,
        TextEncoder::new(cfg.geometry.d_txt, DEFAULT_MAX_TOKENS),
        plan.schedule(&cfg.geometry)?,
        plan.top_n,
    )
}

/// The trained bundle from `checkpoint_dir`.
pub fn load_bundle(cfg: &RunConfig) -> Result<ExpertBundle> {
    cfg.validate()?;
    let base = load_base(cfg)?;
    let dir = cfg.checkpoint_dir();
    let experts = (0..cfg.train.experts)
        .map(|i| load_expert(&expert_path(&dir, i), &cfg.geometry))
        .collect::<Result<Vec<_>>>()?;
    bundle_from(cfg, &cfg.train, &base, experts)
}

/// Experts fine-tuned from the unperturbed base expert on the same slices.
pub fn similar_bundle(cfg: &RunConfig) -> Result<ExpertBundle> {
    let base = load_base(cfg)?;
    let experts = train_experts(&cfg.geometry, &cfg.train, &base, cfg.seed, false)?;
    assemble(&cfg.geometry, &cfg.train, &base, experts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArgs {
    pub prompt: String,
    pub language: String,
    pub space: LatentSpace,
    pub fast: bool,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Proceed,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub prompt: String,
    pub language_tag: String,
    pub seed: u64,
    pub eu: f64,
    pub reported: f64,
    pub space: LatentSpace,
    pub decision: Decision,
    /// Written only by a fast run that proceeds.
    pub image: Option<PathBuf>,
}

impl ScoreOutput {
    pub fn exit_code(&self) -> i32 {
        match self.decision {
            Decision::Proceed => EXIT_OK,
            Decision::Halt => EXIT_HALT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFile {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for LatentFile {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn cmd_score(cfg: &RunConfig, args: &ScoreArgs) -> Result<ScoreOutput> {
    let bundle = load_bundle(cfg)?;
    score_with(&bundle, cfg, args)
}

pub fn score_with(bundle: &ExpertBundle, cfg: &RunConfig, args: &ScoreArgs) -> Result<ScoreOutput> {
    let prompt = Prompt::new(args.prompt.clone(), args.language.clone())?;
    let (estimate, image): (UncertaintyEstimate, Option<Tensor>) = if args.fast {
        bundle.fast_emoe(&prompt, cfg.seed, args.space, args.threshold)?
    } else {
        (bundle.estimate_uncertainty(&prompt, cfg.seed, args.space)?, None)
    };
    let halted = args.threshold.is_some_and(|th| estimate.reported >= th);
    let image = match image {
        Some(z) => {
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(format!("image_{:016x}.json", prompt.fingerprint()));
            write_json(&LatentFile::from(&z), &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(ScoreOutput {
        prompt: prompt.text,
        language_tag: prompt.language_tag,
        seed: cfg.seed,
        eu: estimate.eu,
        reported: estimate.reported,
        space: estimate.space,
        decision: if halted { Decision::Halt } else { Decision::Proceed },
        image,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOutput {
    pub prompt: String,
    pub language_tag: String,
    pub seed: u64,
    pub estimate: UncertaintyEstimate,
    /// One final latent per expert path.
    pub latents: Vec<LatentFile>,
}

/// Full separated rollout; writes `generate.json`.
pub fn cmd_generate(cfg: &RunConfig, prompt: &str, language: &str, space: LatentSpace) -> Result<(GenerateOutput, PathBuf)> {
    let bundle = load_bundle(cfg)?;
    let prompt = Prompt::new(prompt, language)?;
    let r = bundle.emoe_rollout(&prompt, cfg.seed, bundle.schedule().steps(), space)?;
    let out = GenerateOutput {
        prompt: prompt.text,
        language_tag: prompt.language_tag,
        seed: cfg.seed,
        estimate: r.estimate,
        latents: r.latents.iter().map(LatentFile::from).collect(),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("generate.json");
    write_json(&out, &path)?;
    Ok((out, path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// Writes `ablation.json` plus flat CSVs into `dir`.
pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(report, &dir.join("ablation.json"))?;
    let mut w = csv_writer(&dir.join("subsets.csv"))?;
    w.write_record(["experts", "size", "in_dist_mean", "ood_mean", "welch_p"])?;
    for s in &report.subsets {
        let ids: Vec<String> = s.experts.iter().map(usize::to_string).collect();
        w.write_record([
            ids.join(" "),
            s.experts.len().to_string(),
            s.separation.in_dist_mean.to_string(),
            s.separation.ood_mean.to_string(),
            s.separation.welch.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("steps.csv"))?;
    w.write_record(["t", "in_dist_mean", "ood_mean"])?;
    for p in &report.steps {
        w.write_record([p.t.to_string(), p.in_dist_mean.to_string(), p.ood_mean.to_string()])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("spaces.csv"))?;
    w.write_record(["space", "in_dist_mean", "ood_mean", "welch_p"])?;
    for s in &report.spaces {
        w.write_record([
            s.space.to_string(),
            s.separation.in_dist_mean.to_string(),
            s.separation.ood_mean.to_string(),
            s.separation.welch.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ablation sweeps on the trained bundle and a freshly tuned similar bundle.
pub fn ablations(cfg: &RunConfig, bundle: &ExpertBundle) -> Result<AblationReport> {
    let corpus = make_corpus(&cfg.experiment.corpus, cfg.corpus_seed())?;
    let similar = similar_bundle(cfg)?;
    run_ablations(bundle, Some(&similar), &corpus, &cfg.ablation_config())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let bundle = load_bundle(cfg)?;
    let report = ablations(cfg, &bundle)?;
    let dir = cfg.out_dir.join("ablate");
    write_ablation(&report, &dir)?;
    Ok(dir)
}

/// Main experiment plus ablations under `<out_dir>/experiment`.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<(ExperimentReport, PathBuf)> {
    let bundle = load_bundle(cfg)?;
    let corpus = make_corpus(&cfg.experiment.corpus, cfg.corpus_seed())?;
    let mut report = run_experiment(&bundle, &corpus, &cfg.experiment_config())?;
    report.config_hash = cfg.hash()?;
    let dir = cfg.out_dir.join("experiment");
    write_report(&report, &dir)?;
    write_ablation(&ablations(cfg, &bundle)?, &dir.join("ablation"))?;
    Ok((report, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpProbeReport {
    pub seeds: u64,
    pub median: Vec<GpProbeRow>,
    /// Log-log slope of the median mean error against N.
    pub mean_error_slope: f64,
}

pub fn gp_probe(cfg: &RunConfig) -> Result<GpProbeReport> {
    cfg.validate()?;
    let runs = (0..cfg.gp.seeds)
        .map(|k| gp_convergence_probe(&cfg.gp.n_values, cfg.seed.wrapping_add(k)))
        .collect::<Result<Vec<_>>>()?;
    let median = median_rows(&runs)?;
    let x: Vec<f64> = median.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = median.iter().map(|r| r.mean_error).collect();
    let mean_error_slope = if median.len() >= 2 {
        loglog_slope(&x, &y)?
    } else {
        f64::NAN
    };
    Ok(GpProbeReport {
        seeds: cfg.gp.seeds,
        median,
        mean_error_slope,
    })
}

pub fn cmd_gp_probe(cfg: &RunConfig) -> Result<(GpProbeReport, PathBuf)> {
    let report = gp_probe(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("gp_probe.json");
    write_json(&report, &path)?;
    let mut w = csv_writer(&cfg.out_dir.join("gp_probe.csv"))?;
    w.write_record(["n", "mean_error", "var_ratio", "var_spread"])?;
    for r in &report.median {
        w.write_record([
            r.n.to_string(),
            r.mean_error.to_string(),
            r.var_ratio.to_string(),
            r.var_spread.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((report, path))
}
