use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{MissingVectorMode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Architecture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainEhr,
    PretrainCxr,
    FinetuneFusion,
}

/// How the encoders of a fusion model start fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Pretrained,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub stage: Stage,
    /// Share of image-missing training instances kept while fine-tuning.
    pub unimodal_fraction: f64,
    pub missing_vector_mode: MissingVectorMode,
    pub seed: u64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_search_runs: usize,
    pub bootstrap_iterations: usize,
    pub confidence_level: f64,
    pub grad_clip: f64,
    /// Network trained in the fine-tuning stage.
    pub architecture: Architecture,
    pub init: InitMode,
    pub model: ModelConfig,
    /// Random flips and affine jitter on training images.
    pub augment: bool,
    /// Pretrained encoder checkpoints for fine-tuning from files.
    pub ehr_checkpoint: Option<PathBuf>,
    pub cxr_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 15,
            stage: Stage::FinetuneFusion,
            unimodal_fraction: 1.0,
            missing_vector_mode: MissingVectorMode::Zeros,
            seed: 0,
            lr_min: 1e-5,
            lr_max: 1e-3,
            lr_search_runs: 10,
            bootstrap_iterations: 1000,
            confidence_level: 0.95,
            grad_clip: 5.0,
            architecture: Architecture::MedFuse,
            init: InitMode::Pretrained,
            model: ModelConfig::default(),
            augment: true,
            ehr_checkpoint: None,
            cxr_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.unimodal_fraction) {
            problems.push(format!("unimodal_fraction {} not in [0, 1]", self.unimodal_fraction));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            problems.push(format!("learning-rate range [{}, {}] is invalid", self.lr_min, self.lr_max));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            problems.push(format!("confidence_level {} not in (0, 1)", self.confidence_level));
        }
        if !(self.grad_clip > 0.0) {
            problems.push(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if self.stage == Stage::FinetuneFusion
            && !matches!(self.architecture, Architecture::MedFuse | Architecture::Early | Architecture::Joint)
        {
            problems.push(format!("{} is not a fusion architecture", self.architecture.name()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}
