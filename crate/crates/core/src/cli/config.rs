//! Run configuration: one JSON document, every field optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::experiments::ablation::AblationConfig;
use crate::experiments::report::ExperimentConfig;
use crate::experiments::training::TrainPlan;
use crate::math::mix64;
use crate::text::fnv1a;
use crate::unet::Geometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpProbeConfig {
    pub n_values: Vec<usize>,
    /// Independent probe runs; the reported table is their median.
    pub seeds: u64,
}

impl Default for GpProbeConfig {
    fn default() -> Self {
        Self {
            n_values: (1..=8).map(|k| 1usize << k).collect(),
            seeds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Training uses it directly; the corpus, the experiment
    /// and the ablations derive theirs from it, overriding the seeds in
    /// the nested sections.
    pub seed: u64,
    pub geometry: Geometry,
    pub train: TrainPlan,
    pub experiment: ExperimentConfig,
    pub ablation: AblationConfig,
    pub gp: GpProbeConfig,
    /// Root of every output.
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            geometry: Geometry::default(),
            train: TrainPlan::default(),
            experiment: ExperimentConfig::default(),
            ablation: AblationConfig::default(),
            gp: GpProbeConfig::default(),
            out_dir: PathBuf::from("emoe-out"),
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EmoeError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| EmoeError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.train.validate()?;
        self.experiment.corpus.validate()?;
        if self.gp.n_values.iter().any(|&n| n < 2) || self.gp.n_values.is_empty() {
            return Err(EmoeError::Config("gp.n_values must be non-empty and >= 2".into()));
        }
        if self.gp.seeds == 0 {
            return Err(EmoeError::Config("gp.seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn corpus_seed(&self) -> u64 {
        mix64(self.seed ^ 0xc0_4905)
    }

    /// Experiment settings with the master seed applied.
    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            ..self.experiment.clone()
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            seed: self.seed,
            ..self.ablation
        }
    }

    /// FNV-1a of the canonical JSON form, as 16 hex digits. Output and
    /// checkpoint paths are left out.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out_dir = RunConfig::default().out_dir;
        canonical.checkpoint_dir = None;
        Ok(format!("{:016x}", fnv1a(serde_json::to_string(&canonical)?.as_bytes())))
    }
}
