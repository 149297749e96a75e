use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::SetKind;
use crate::config::Task;
use crate::data::labels::{task_label_categories, task_label_names};
use crate::data::{DatasetSplit, Example, MultimodalInstance, SplitName};
use crate::error::Result;
use crate::eval::{ensemble_predict, subgroup_report, Grouping, MetricsReport, ReportOptions};
use crate::model::Model;
use crate::training::{derive_seed, prepare_eval, TrainConfig};

/// Seed stream reserved for test-time image dropping.
const DROP_STREAM: u64 = 0xD209;

#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Single(&'a Model),
    Ensemble { unimodal: &'a Model, fusion: &'a Model },
}

impl Predictor<'_> {
    fn task(&self) -> Option<Task> {
        match self {
            Predictor::Single(m) => m.spec.task,
            Predictor::Ensemble { fusion, .. } => fusion.spec.task,
        }
    }

    pub fn predict(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        match *self {
            Predictor::Single(m) => {
                if m.architecture().uses_images() {
                    m.predict(&prepare_eval(examples, &m.spec.config)?)
                } else {
                    m.predict(examples)
                }
            }
            Predictor::Ensemble { unimodal, fusion } => {
                ensemble_predict(unimodal, fusion, &prepare_eval(examples, &fusion.spec.config)?)
            }
        }
    }
}

pub fn select(instances: &[MultimodalInstance], set: SetKind) -> Vec<&MultimodalInstance> {
    instances
        .iter()
        .filter(|i| set == SetKind::Partial || i.is_paired())
        .collect()
}

/// Examples of `set` with images removed from a `drop_rate` share of them.
/// Each instance draws one uniform number from `seed`, so the removed sets
/// are nested as the rate grows.
pub fn drop_images(instances: &[&MultimodalInstance], drop_rate: f64, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DROP_STREAM, 0));
    instances
        .iter()
        .map(|inst| {
            let u: f64 = rng.random();
            let mut e = Example::from_instance(inst);
            if u < drop_rate {
                e.image = None;
            }
            e
        })
        .collect()
}

/// Macro metrics with bootstrap intervals plus age-band and, for
/// phenotyping, label-category breakdowns.
pub fn evaluate(
    predictor: Predictor<'_>,
    split: &DatasetSplit,
    part: SplitName,
    set: SetKind,
    drop_rate: f64,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let task = predictor.task().expect("evaluated models predict a task");
    let instances = select(split.part(part), set);
    let examples = drop_images(&instances, drop_rate, cfg.seed);
    let scores = predictor.predict(&examples)?;
    let labels: Vec<Vec<f64>> = examples.iter().map(|e| e.targets.clone()).collect();
    let ages: Vec<Option<f64>> = instances.iter().map(|i| i.age).collect();
    let names = task_label_names(task);
    let categories = task_label_categories(task);
    let opts = ReportOptions {
        label_names: &names,
        categories: categories.as_deref(),
        bootstrap_iterations: cfg.bootstrap_iterations,
        confidence: cfg.confidence_level,
        seed: cfg.seed,
    };
    let mut report = subgroup_report(&ages, &scores, &labels, Grouping::AgeBands, &opts)?;
    if categories.is_some() {
        let by_category = subgroup_report(&ages, &scores, &labels, Grouping::PhenotypeCategory, &opts)?;
        let mut groups: BTreeMap<_, _> = report.subgroups.take().unwrap_or_default();
        groups.extend(by_category.subgroups.unwrap_or_default());
        report.subgroups = Some(groups);
        report.warnings.extend(by_category.warnings.into_iter().filter(|w| w.starts_with("category")));
    }
    Ok(report)
}
