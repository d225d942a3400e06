//! Trainable networks: the conditional denoiser and the attribute/content
//! classifier, plus their shared training configuration and checkpoints.

mod checkpoint;
mod classifier;
mod denoiser;

pub use checkpoint::{
    digest_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointModel, ModelKind, TensorEntry,
};
pub use classifier::{
    classify, evaluate_heads, features, train_classifier, CONTENT_CLASSES, ClassifierArch, ClassifierConfig, ClassifierModel, Classification,
    LabeledBatch,
};
pub use denoiser::{
    predict_noise, sample_noise_batch, time_features, train_denoiser, DenoiserArch, DenoiserConfig, DenoiserModel,
    NoiseBatch,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Cosine decay of the learning rate to `lr * lr_floor` over the run;
    /// 1.0 keeps it constant.
    #[serde(default = "one")]
    pub lr_floor: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn denoiser_default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            lr_floor: 1.0,
        }
    }

    pub fn classifier_default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            lr_floor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::invalid("lr_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub(crate) fn lr_at(&self, step: usize) -> f64 {
        if self.lr_floor >= 1.0 || self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * w)
    }
}

/// Held-out quality of one classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: String,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss at every step (before that step's update).
    pub loss_curve: Vec<f64>,
    /// Mean of the first and last 50 entries of the curve.
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    /// Held-out metrics per head; empty for the denoiser.
    pub heads: Vec<HeadMetrics>,
}

impl TrainReport {
    pub fn head(&self, name: &str) -> Option<&HeadMetrics> {
        self.heads.iter().find(|h| h.head == name)
    }
}
