//! Assembled networks behind one type, so training, checkpoints and the
//! harness can treat every architecture alike.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::config::{MissingVectorMode, ModelConfig, Task, RADIOLOGY_LABELS};
use crate::data::Example;
use crate::encoders::{Classifier, CxrEncoder, EhrEncoder};
use crate::error::{Error, Result};
use crate::fusion::{ConcatMode, ConcatNet, MedFuseNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Time-series encoder with a task head.
    LstmUni,
    /// Image encoder with a radiology head.
    CxrUni,
    MedFuse,
    Early,
    Joint,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::LstmUni => "lstm_uni",
            Architecture::CxrUni => "cxr_uni",
            Architecture::MedFuse => "medfuse",
            Architecture::Early => "early",
            Architecture::Joint => "joint",
        }
    }

    pub fn uses_ehr(self) -> bool {
        self != Architecture::CxrUni
    }

    pub fn uses_images(self) -> bool {
        self != Architecture::LstmUni
    }
}

#[derive(Clone, Debug)]
enum Net {
    Ehr(EhrEncoder, Classifier),
    Cxr(CxrEncoder, Classifier),
    MedFuse(MedFuseNet),
    Concat(ConcatNet),
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub config: ModelConfig,
    /// Task of the labels the head predicts; `None` for the radiology head.
    pub task: Option<Task>,
    pub missing_vector_mode: MissingVectorMode,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn labels(&self) -> usize {
        self.task.map_or(RADIOLOGY_LABELS, Task::label_count)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    net: Net,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.config.validate()?;
        match (spec.architecture, spec.task) {
            (Architecture::CxrUni, Some(_)) => {
                return Err(Error::invalid("the image classifier predicts radiology labels, not a task"))
            }
            (a, None) if a != Architecture::CxrUni => {
                return Err(Error::invalid(format!("{} needs a task", a.name())))
            }
            _ => {}
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let cfg = &spec.config;
        let labels = spec.labels();
        let net = match spec.architecture {
            Architecture::LstmUni => {
                let enc = EhrEncoder::new(&mut store, "ehr", cfg, &mut rng);
                let head = Classifier::new(&mut store, "ehr_head", enc.out_features(), labels, &mut rng);
                Net::Ehr(enc, head)
            }
            Architecture::CxrUni => {
                let enc = CxrEncoder::new(&mut store, "cxr", cfg, &mut rng);
                let head = Classifier::new(&mut store, "cxr_head", enc.out_features(), labels, &mut rng);
                Net::Cxr(enc, head)
            }
            Architecture::MedFuse => Net::MedFuse(MedFuseNet::new(&mut store, cfg, labels, &mut rng)),
            Architecture::Early | Architecture::Joint => {
                let mode = if spec.architecture == Architecture::Early {
                    ConcatMode::Early
                } else {
                    ConcatMode::Joint
                };
                Net::Concat(ConcatNet::new(&mut store, cfg, labels, mode, spec.missing_vector_mode, &mut rng))
            }
        };
        Ok(Model { spec, store, net })
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn labels(&self) -> usize {
        self.spec.labels()
    }

    pub fn medfuse(&self) -> Option<&MedFuseNet> {
        match &self.net {
            Net::MedFuse(m) => Some(m),
            _ => None,
        }
    }

    pub fn concat(&self) -> Option<&ConcatNet> {
        match &self.net {
            Net::Concat(c) => Some(c),
            _ => None,
        }
    }

    /// `B×labels` logits. The uni-modal time-series model ignores images.
    pub fn logits<'g>(&self, g: &'g Graph<'_>, batch: &[Example]) -> Result<Var<'g>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        match &self.net {
            Net::Ehr(enc, head) => {
                let series = batch
                    .iter()
                    .map(|e| e.ehr.as_ref().ok_or_else(|| Error::invalid(format!("{} has no time series", e.id))))
                    .collect::<Result<Vec<_>>>()?;
                head.logits(g, enc.encode(g, &series)?)
            }
            Net::Cxr(enc, head) => {
                let images = batch
                    .iter()
                    .map(|e| e.image.as_ref().ok_or_else(|| Error::invalid(format!("{} has no image", e.id))))
                    .collect::<Result<Vec<_>>>()?;
                head.logits(g, enc.encode(g, &images)?)
            }
            Net::MedFuse(m) => m.logits(g, batch),
            Net::Concat(c) => c.logits(g, batch),
        }
    }

    /// Probabilities in evaluation mode, row per example.
    pub fn predict(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let g = Graph::new(&self.store, false, 0);
            let probs = self.logits(&g, chunk)?.sigmoid().to_vec();
            out.extend(probs.chunks(self.labels()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Copies parameters whose names start with `prefix` from `src`.
    pub fn load_pretrained(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let copied = self.store.copy_matching(src, prefix)?;
        if copied == 0 {
            return Err(Error::invalid(format!("no parameters under `{prefix}` to transfer")));
        }
        Ok(copied)
    }

    /// Stacks the targets of a batch into `B×labels`.
    pub fn targets(&self, batch: &[Example]) -> Result<Tensor> {
        let l = self.labels();
        let mut data = Vec::with_capacity(batch.len() * l);
        for e in batch {
            if e.targets.len() != l {
                return Err(Error::invalid(format!(
                    "{} has {} targets, model predicts {l}",
                    e.id,
                    e.targets.len()
                )));
            }
            data.extend_from_slice(&e.targets);
        }
        Tensor::new([batch.len(), l], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(architecture: Architecture, task: Option<Task>) -> ModelSpec {
        ModelSpec {
            architecture,
            config: ModelConfig::desk(),
            task,
            missing_vector_mode: MissingVectorMode::Zeros,
            init_seed: 1,
        }
    }

    #[test]
    fn heads_match_tasks() {
        let m = Model::new(spec(Architecture::MedFuse, Some(Task::Phenotyping))).unwrap();
        assert_eq!(m.labels(), 25);
        let c = Model::new(spec(Architecture::CxrUni, None)).unwrap();
        assert_eq!(c.labels(), 14);
        assert!(Model::new(spec(Architecture::CxrUni, Some(Task::Mortality))).is_err());
        assert!(Model::new(spec(Architecture::LstmUni, None)).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(spec(Architecture::Joint, Some(Task::Mortality))).unwrap();
        let b = Model::new(spec(Architecture::Joint, Some(Task::Mortality))).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!((na, ta.data()), (nb, tb.data()));
        }
    }

    #[test]
    fn encoder_names_line_up_for_transfer() {
        let uni = Model::new(spec(Architecture::LstmUni, Some(Task::Mortality))).unwrap();
        let img = Model::new(spec(Architecture::CxrUni, None)).unwrap();
        let mut fused = Model::new(spec(Architecture::MedFuse, Some(Task::Mortality))).unwrap();
        let n_ehr = fused.load_pretrained(&uni.store, "ehr.").unwrap();
        let n_cxr = fused.load_pretrained(&img.store, "cxr.").unwrap();
        assert_eq!(n_ehr, 6);
        assert!(n_cxr > 0);
        let id = fused.store.find("ehr.0.w_ih").unwrap();
        assert_eq!(fused.store.get(id).data(), uni.store.get(uni.store.find("ehr.0.w_ih").unwrap()).data());
    }
}
