use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of radiology labels attached to every chest X-ray.
pub const RADIOLOGY_LABELS: usize = 14;

/// Width of one discretized time-series row.
pub const EHR_FEATURES: usize = 76;

/// Prediction task. The time-series modality always carries the task labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Phenotyping,
    Mortality,
}

impl Task {
    pub fn label_count(self) -> usize {
        match self {
            Task::Phenotyping => 25,
            Task::Mortality => 1,
        }
    }

    /// Observation window in hours, `None` for the whole stay.
    pub fn horizon_hours(self) -> Option<f64> {
        match self {
            Task::Phenotyping => None,
            Task::Mortality => Some(48.0),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Task::Phenotyping => 0,
            Task::Mortality => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Task::Phenotyping),
            1 => Ok(Task::Mortality),
            _ => Err(Error::invalid(format!("unknown task id {id}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Phenotyping => "phenotyping",
            Task::Mortality => "mortality",
        }
    }
}

/// Architecture sizes. `Default` gives the full-size model; [`ModelConfig::desk`]
/// is a reduced variant that trains in seconds on a single CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub ehr_input: usize,
    /// Latent size `m` of the time-series encoder and of the projected image token.
    pub ehr_hidden: usize,
    pub ehr_layers: usize,
    pub ehr_dropout: f64,
    pub image_size: usize,
    pub image_channels: usize,
    /// Channel width of each convolutional stage; stages after the first halve the resolution.
    pub cxr_widths: Vec<usize>,
    pub cxr_blocks_per_stage: usize,
    /// Image feature size `n`.
    pub cxr_features: usize,
    pub fusion_hidden: usize,
    /// Hidden width of the concatenation baselines' two-layer head.
    pub concat_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ehr_input: EHR_FEATURES,
            ehr_hidden: 256,
            ehr_layers: 2,
            ehr_dropout: 0.3,
            image_size: 224,
            image_channels: 3,
            cxr_widths: vec![16, 32, 64, 128],
            cxr_blocks_per_stage: 2,
            cxr_features: 512,
            fusion_hidden: 512,
            concat_hidden: 512,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            ehr_hidden: 16,
            ehr_dropout: 0.0,
            image_size: 16,
            cxr_widths: vec![4, 8],
            cxr_blocks_per_stage: 1,
            cxr_features: 16,
            fusion_hidden: 16,
            concat_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ehr_input", self.ehr_input),
            ("ehr_hidden", self.ehr_hidden),
            ("ehr_layers", self.ehr_layers),
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("cxr_blocks_per_stage", self.cxr_blocks_per_stage),
            ("cxr_features", self.cxr_features),
            ("fusion_hidden", self.fusion_hidden),
            ("concat_hidden", self.concat_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model config: {name} must be positive")));
            }
        }
        if self.cxr_widths.is_empty() || self.cxr_widths.contains(&0) {
            return Err(Error::invalid("model config: cxr_widths must be non-empty and positive"));
        }
        if !(0.0..1.0).contains(&self.ehr_dropout) {
            return Err(Error::invalid("model config: ehr_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Stand-in for an absent image in the concatenation baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingVectorMode {
    #[default]
    Zeros,
    Learnable,
}
