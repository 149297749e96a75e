use serde::{Deserialize, Serialize};

use crate::config::{MissingVectorMode, Task};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::training::{InitMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentModel {
    LstmUni,
    Medfuse,
    Early,
    Joint,
    /// Fusion model on paired instances, uni-modal LSTM on the rest.
    Ensemble,
}

impl ExperimentModel {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentModel::LstmUni => "lstm_uni",
            ExperimentModel::Medfuse => "medfuse",
            ExperimentModel::Early => "early",
            ExperimentModel::Joint => "joint",
            ExperimentModel::Ensemble => "ensemble",
        }
    }

    /// Architecture of the fine-tuned fusion network, if any.
    pub fn fusion_architecture(self) -> Option<Architecture> {
        match self {
            ExperimentModel::LstmUni => None,
            ExperimentModel::Medfuse | ExperimentModel::Ensemble => Some(Architecture::MedFuse),
            ExperimentModel::Early => Some(Architecture::Early),
            ExperimentModel::Joint => Some(Architecture::Joint),
        }
    }
}

/// Which instances a set keeps: only those with an image, or all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Paired,
    Partial,
}

impl SetKind {
    pub fn name(self) -> &'static str {
        match self {
            SetKind::Paired => "paired",
            SetKind::Partial => "partial",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub task: Task,
    pub model: ExperimentModel,
    #[serde(default = "partial")]
    pub train_set: SetKind,
    #[serde(default = "paired")]
    pub eval_set: SetKind,
    /// One training sub-run per value.
    #[serde(default)]
    pub unimodal_fraction: Option<Vec<f64>>,
    /// One evaluation sub-run per value, with images removed at random from
    /// that share of test instances.
    #[serde(default)]
    pub test_drop_rate: Option<Vec<f64>>,
    #[serde(default)]
    pub missing_vector_mode: MissingVectorMode,
    /// Learning-rate draws per training stage; 0 keeps `train.learning_rate`.
    #[serde(default = "ten")]
    pub n_lr_runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitMode,
    /// Base settings shared by every stage.
    #[serde(default)]
    pub train: TrainConfig,
}

fn partial() -> SetKind {
    SetKind::Partial
}

fn paired() -> SetKind {
    SetKind::Paired
}

fn ten() -> usize {
    10
}

/// Sweep a spec fans out over.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    None,
    UnimodalFraction(Vec<f64>),
    TestDropRate(Vec<f64>),
}

impl Sweep {
    pub fn key(&self) -> Option<&'static str> {
        match self {
            Sweep::None => None,
            Sweep::UnimodalFraction(_) => Some("unimodal_fraction"),
            Sweep::TestDropRate(_) => Some("test_drop_rate"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("experiment spec: {e}")))
    }

    pub fn sweep(&self) -> Sweep {
        match (&self.unimodal_fraction, &self.test_drop_rate) {
            (Some(v), None) => Sweep::UnimodalFraction(v.clone()),
            (None, Some(v)) => Sweep::TestDropRate(v.clone()),
            _ => Sweep::None,
        }
    }

    /// Checks every field and combination before any training starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            problems.push(format!("name `{}` must be non-empty and use only [A-Za-z0-9._-]", self.name));
        }
        for (key, values) in [("unimodal_fraction", &self.unimodal_fraction), ("test_drop_rate", &self.test_drop_rate)] {
            if let Some(v) = values {
                if v.is_empty() {
                    problems.push(format!("{key} sweep is empty"));
                }
                if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    problems.push(format!("{key} value {bad} not in [0, 1]"));
                }
            }
        }
        if self.unimodal_fraction.is_some() && self.test_drop_rate.is_some() {
            problems.push("sweep over one of unimodal_fraction and test_drop_rate, not both".to_string());
        }
        if self.unimodal_fraction.is_some() {
            if self.model == ExperimentModel::LstmUni {
                problems.push("unimodal_fraction applies to fusion models only".to_string());
            }
            if self.train_set == SetKind::Paired {
                problems.push("unimodal_fraction needs train_set partial".to_string());
            }
        }
        if self.test_drop_rate.is_some() && self.model == ExperimentModel::LstmUni {
            problems.push("lstm_uni ignores images, so test_drop_rate has no effect".to_string());
        }
        if self.model == ExperimentModel::Ensemble && self.train_set == SetKind::Paired {
            problems.push("the ensemble's uni-modal member trains on partial data".to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}
