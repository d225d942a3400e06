//! Run configuration: one JSON document with every seed spelled out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use difftraj::diffusion::ScheduleParams;
use difftraj::models::{ClassifierConfig, DenoiserConfig, TrainConfig};
use difftraj::phantom::AttrProbs;
use difftraj::trajectory::DEFAULT_SWAP_SET;
use difftraj::Attribute;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub attr_probs: BTreeMap<Attribute, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ClassifierConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Trajectories per style attribute; trajectory `i` uses noise seed `noise_seed + i`.
    pub trajectories: usize,
    pub noise_seed: u64,
    pub swap_set: Vec<usize>,
    pub style_attributes: Vec<Attribute>,
    pub cfrt_tau: usize,
    pub flip_threshold: f64,
    pub n_ctrl: usize,
    pub m: usize,
    /// How many seeds get their trajectory and curve archives written.
    pub archived_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub embedding_seed: u64,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserSection,
    pub classifier: ClassifierSection,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    /// The reference configuration, writing under `output_dir`.
    pub fn reference(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            dataset: DatasetConfig {
                seed: 0,
                train: 8000,
                val: 1000,
                test: 1000,
                attr_probs: Attribute::ALL.into_iter().map(|a| (a, 0.5)).collect(),
            },
            embedding_seed: 0,
            schedule: ScheduleParams::default(),
            denoiser: DenoiserSection {
                model: DenoiserConfig::default(),
                train: TrainConfig::denoiser_default(),
            },
            classifier: ClassifierSection {
                model: ClassifierConfig::default(),
                train: TrainConfig::classifier_default(),
            },
            evaluation: EvalConfig {
                trajectories: 100,
                noise_seed: 1000,
                swap_set: DEFAULT_SWAP_SET.to_vec(),
                style_attributes: Attribute::ALL.to_vec(),
                cfrt_tau: 25,
                flip_threshold: 0.5,
                n_ctrl: 7,
                m: 50,
                archived_seeds: 2,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        cfg.validate().map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn attr_probs(&self) -> AttrProbs {
        self.dataset.attr_probs.clone()
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = &self.dataset;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return Err("dataset: split sizes must be positive".into());
        }
        if let Some((a, p)) = d.attr_probs.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(format!("dataset.attr_probs.{a}: {p} outside [0, 1]"));
        }
        self.schedule.build().map_err(|e| format!("schedule: {e}"))?;
        if self.denoiser.model.steps != self.schedule.steps {
            return Err(format!(
                "denoiser.model.steps: {} differs from schedule.steps {}",
                self.denoiser.model.steps, self.schedule.steps
            ));
        }
        self.denoiser.train.validate().map_err(|e| format!("denoiser.train: {e}"))?;
        self.classifier.train.validate().map_err(|e| format!("classifier.train: {e}"))?;
        let ev = &self.evaluation;
        if ev.trajectories == 0 {
            return Err("evaluation.trajectories: must be positive".into());
        }
        if ev.style_attributes.is_empty() {
            return Err("evaluation.style_attributes: empty".into());
        }
        if !ev.swap_set.contains(&ev.cfrt_tau) {
            return Err(format!("evaluation.cfrt_tau: {} not in swap_set", ev.cfrt_tau));
        }
        if ev.swap_set.windows(2).any(|w| w[1] <= w[0]) || ev.swap_set.iter().any(|&t| t > self.schedule.steps) {
            return Err("evaluation.swap_set: must be strictly increasing within 0..=steps".into());
        }
        if ev.n_ctrl < 2 || ev.n_ctrl > ev.swap_set.len() + 1 {
            return Err(format!("evaluation.n_ctrl: {} outside 2..={}", ev.n_ctrl, ev.swap_set.len() + 1));
        }
        if ev.m < 2 {
            return Err("evaluation.m: must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&ev.flip_threshold) {
            return Err("evaluation.flip_threshold: outside [0, 1]".into());
        }
        Ok(())
    }
}
