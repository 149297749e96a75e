use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, select, Predictor};
use super::plot::{line_chart, Point, Series};
use super::spec::{ExperimentModel, ExperimentSpec, SetKind, Sweep};
use crate::config::Task;
use crate::data::{load_dataset, DatasetMeta, DatasetSplit, Example, SplitName};
use crate::error::{Error, Result};
use crate::eval::{per_label_csv, MetricsReport};
use crate::model::Model;
use crate::training::{
    derive_seed, run_stage, sample_learning_rates, search_learning_rate, subsample_unimodal, Checkpoint,
    CheckpointMeta, Pretrained, Stage, TrainConfig, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub learning_rate: f64,
    /// `(learning rate, best validation AUROC)` per search draw.
    pub lr_runs: Vec<(f64, f64)>,
    pub best_val_auroc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_instances: usize,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubRun {
    pub dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Validation AUROC of the model evaluated in this sub-run.
    pub val_auroc: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub task: Task,
    pub model: ExperimentModel,
    pub train_set: SetKind,
    pub eval_set: SetKind,
    pub seed: u64,
    pub registry_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<String>,
    pub stages: BTreeMap<String, StageSummary>,
    pub runs: Vec<SubRun>,
    /// Index into `runs` of the sweep value with the best validation AUROC.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal: Option<usize>,
}

impl ExperimentReport {
    /// The sub-run that represents the experiment in comparisons.
    pub fn headline(&self) -> &SubRun {
        match (self.optimal, &self.sweep) {
            (Some(i), _) => &self.runs[i],
            (None, Some(_)) => self.runs.iter().find(|r| r.value == Some(0.0)).unwrap_or(&self.runs[0]),
            _ => &self.runs[0],
        }
    }
}

/// Settings needed to recompute a sub-run's metrics from its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unimodal_checkpoint: Option<String>,
    pub split: SplitName,
    pub set: SetKind,
    pub drop_rate: f64,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub run_dir: PathBuf,
    pub report: ExperimentReport,
}

pub const REPORT_FILE: &str = "metrics.json";
pub const LATEST_FILE: &str = "latest";

fn stage_config(spec: &ExperimentSpec, stage: Stage, fraction: f64) -> TrainConfig {
    TrainConfig {
        stage,
        architecture: spec.model.fusion_architecture().unwrap_or(spec.train.architecture),
        init: spec.init,
        unimodal_fraction: fraction,
        missing_vector_mode: spec.missing_vector_mode,
        seed: spec.seed,
        ..spec.train.clone()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

struct Runner<'a> {
    spec: &'a ExperimentSpec,
    meta: &'a DatasetMeta,
    dir: &'a Path,
    used: BTreeSet<String>,
    stages: BTreeMap<String, StageSummary>,
}

impl Runner<'_> {
    /// Learning-rate search (or one fixed-rate run) for one stage, saving the
    /// winning model as `checkpoints/{file}`.
    fn train(&mut self, cfg: &TrainConfig, label: &str, train: &[Example], val: &[Example], pre: Pretrained<'_>) -> Result<TrainOutcome> {
        let train_used = if cfg.stage == Stage::FinetuneFusion {
            subsample_unimodal(train, cfg.unimodal_fraction, derive_seed(cfg.seed, u64::MAX, 0))
        } else {
            train.to_vec()
        };
        self.used.extend(train_used.iter().map(|e| e.id.clone()));
        let task = self.spec.task;
        let stage_id = match cfg.stage {
            Stage::PretrainEhr => 1,
            Stage::PretrainCxr => 2,
            Stage::FinetuneFusion => 3,
        };
        let rates = if self.spec.n_lr_runs == 0 {
            vec![cfg.learning_rate]
        } else {
            sample_learning_rates(self.spec.n_lr_runs, cfg.lr_min, cfg.lr_max, derive_seed(cfg.seed, stage_id, 0x1A))
        };
        let result = search_learning_rate(&rates, |lr| {
            log::info!("{label}: training with learning rate {lr:.3e}");
            run_stage(&TrainConfig { learning_rate: lr, ..cfg.clone() }, task, train, val, pre)
        })?;
        let out = result.outcome;
        let file = format!("{label}.mfck");
        let train_cfg = TrainConfig { learning_rate: result.learning_rate, ..cfg.clone() };
        Checkpoint::new(
            &out.model,
            CheckpointMeta {
                spec: out.model.spec.clone(),
                train: Some(train_cfg),
                registry_hash: self.meta.registry_hash.clone(),
                best_val_auroc: out.best_val_auroc,
                best_epoch: out.best_epoch,
            },
        )
        .save(&self.dir.join("checkpoints").join(&file))?;
        self.stages.insert(
            label.to_string(),
            StageSummary {
                learning_rate: result.learning_rate,
                lr_runs: result.runs,
                best_val_auroc: out.best_val_auroc,
                best_epoch: out.best_epoch,
                epochs_run: out.epochs_run,
                train_instances: train_used.len(),
                checkpoint: format!("checkpoints/{file}"),
            },
        );
        Ok(out)
    }
}

fn examples(split: &DatasetSplit, part: SplitName, set: SetKind, images: bool) -> Vec<Example> {
    select(split.part(part), set)
        .into_iter()
        .map(|i| {
            let e = Example::from_instance(i);
            if images { e } else { Example { image: None, ..e } }
        })
        .collect()
}

fn audit(split: &DatasetSplit, used: &BTreeSet<String>) -> Result<serde_json::Value> {
    let ids = |part: SplitName| -> BTreeSet<String> {
        split
            .part(part)
            .iter()
            .map(|i| i.instance_id.clone())
            .chain(split.cxr_only(part).iter().map(|c| c.sample_id.clone()))
            .collect()
    };
    let (val, test) = (ids(SplitName::Val), ids(SplitName::Test));
    let leaked_val: Vec<&String> = used.intersection(&val).collect();
    let leaked_test: Vec<&String> = used.intersection(&test).collect();
    if !leaked_val.is_empty() || !leaked_test.is_empty() {
        return Err(Error::Contract(format!(
            "training touched {} validation and {} test ids",
            leaked_val.len(),
            leaked_test.len()
        )));
    }
    Ok(serde_json::json!({
        "train_ids_used": used,
        "val_ids": val.len(),
        "test_ids": test.len(),
        "train_val_overlap": leaked_val,
        "train_test_overlap": leaked_test,
    }))
}

/// Runs every stage of `spec` on an in-memory dataset and writes the results
/// into `dir`. The report holds no timestamps or paths, so it is identical
/// across reruns with the same seed.
pub fn run_experiment_in(spec: &ExperimentSpec, meta: &DatasetMeta, split: &DatasetSplit, dir: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    if meta.task != spec.task {
        return Err(Error::invalid(format!(
            "dataset task {} differs from experiment task {}",
            meta.task.name(),
            spec.task.name()
        )));
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    write_json(&dir.join("spec.json"), spec)?;
    let mut runner = Runner { spec, meta, dir, used: BTreeSet::new(), stages: BTreeMap::new() };

    let val_ehr = examples(split, SplitName::Val, spec.eval_set, false);
    let val_fusion = examples(split, SplitName::Val, spec.eval_set, true);
    let fusion_arch = spec.model.fusion_architecture();

    // The uni-modal LSTM, either as the model itself or as a pretrained encoder.
    let ehr_set = if spec.model == ExperimentModel::Ensemble { SetKind::Partial } else { spec.train_set };
    let needs_ehr = fusion_arch.is_none()
        || spec.model == ExperimentModel::Ensemble
        || spec.init == crate::training::InitMode::Pretrained;
    let ehr = if needs_ehr {
        let cfg = stage_config(spec, Stage::PretrainEhr, 1.0);
        let train = examples(split, SplitName::Train, ehr_set, false);
        Some(runner.train(&cfg, "ehr", &train, &val_ehr, Pretrained::default())?)
    } else {
        None
    };
    let cxr = if fusion_arch.is_some() && spec.init == crate::training::InitMode::Pretrained {
        let cfg = stage_config(spec, Stage::PretrainCxr, 1.0);
        let pool = |part| split.cxr_pool(part).iter().map(Example::from_cxr).collect::<Vec<_>>();
        Some(runner.train(&cfg, "cxr", &pool(SplitName::Train), &pool(SplitName::Val), Pretrained::default())?)
    } else {
        None
    };

    let sweep = spec.sweep();
    let fractions: Vec<Option<f64>> = match &sweep {
        Sweep::UnimodalFraction(v) => v.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let drops: Vec<Option<f64>> = match &sweep {
        Sweep::TestDropRate(v) => v.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let key = sweep.key();
    let sub_dir = |value: Option<f64>| match (key, value) {
        (Some(k), Some(v)) => format!("{k}-{v}"),
        _ => "main".to_string(),
    };

    let mut runs = Vec::new();
    for fraction in fractions {
        let trained: Option<(TrainOutcome, String)> = match fusion_arch {
            None => None,
            Some(_) => {
                let cfg = stage_config(spec, Stage::FinetuneFusion, fraction.unwrap_or(spec.train.unimodal_fraction));
                let train = examples(split, SplitName::Train, spec.train_set, true);
                let pre = Pretrained {
                    ehr: ehr.as_ref().map(|o| &o.model.store),
                    cxr: cxr.as_ref().map(|o| &o.model.store),
                };
                let label = match fraction {
                    Some(f) => format!("fusion-{}", sub_dir(Some(f))),
                    None => "fusion".to_string(),
                };
                let out = runner.train(&cfg, &label, &train, &val_fusion, pre)?;
                Some((out, label))
            }
        };
        let (predictor, checkpoint, unimodal_checkpoint, val_auroc) = match (&trained, spec.model) {
            (None, _) => {
                let e = ehr.as_ref().expect("uni-modal model trained");
                (Predictor::Single(&e.model), "checkpoints/ehr.mfck".to_string(), None, e.best_val_auroc)
            }
            (Some((f, label)), ExperimentModel::Ensemble) => {
                let e = ehr.as_ref().expect("ensemble member trained");
                let predictor = Predictor::Ensemble { unimodal: &e.model, fusion: &f.model };
                let val = predictor.predict(&val_fusion)?;
                let labels: Vec<Vec<f64>> = val_fusion.iter().map(|x| x.targets.clone()).collect();
                let auroc = crate::eval::macro_auroc(&val, &labels)?.unwrap_or(f64::NAN);
                (predictor, format!("checkpoints/{label}.mfck"), Some("checkpoints/ehr.mfck".to_string()), auroc)
            }
            (Some((f, label)), _) => (Predictor::Single(&f.model), format!("checkpoints/{label}.mfck"), None, f.best_val_auroc),
        };
        let eval_cfg = stage_config(spec, Stage::FinetuneFusion, 1.0);
        for &drop in &drops {
            let value = fraction.or(drop);
            let name = sub_dir(value);
            let sub = dir.join(&name);
            fs::create_dir_all(&sub)?;
            let record = EvalRecord {
                checkpoint: checkpoint.clone(),
                unimodal_checkpoint: unimodal_checkpoint.clone(),
                split: SplitName::Test,
                set: spec.eval_set,
                drop_rate: drop.unwrap_or(0.0),
            };
            let test = evaluate(predictor, split, SplitName::Test, spec.eval_set, record.drop_rate, &eval_cfg)?;
            write_json(&sub.join("eval.json"), &record)?;
            write_json(&sub.join(REPORT_FILE), &test)?;
            fs::write(sub.join("per_label.csv"), per_label_csv(&test))?;
            runs.push(SubRun { dir: name, value, val_auroc, test });
        }
    }

    let optimal = match sweep {
        Sweep::UnimodalFraction(_) => (0..runs.len()).fold(None, |best: Option<usize>, i| match best {
            Some(b) if runs[b].val_auroc >= runs[i].val_auroc => Some(b),
            _ => Some(i),
        }),
        _ => None,
    };
    if let Some(k) = key {
        let point = |r: &SubRun, auroc: bool| {
            let (y, ci) = if auroc { (r.test.auroc, r.test.auroc_ci) } else { (r.test.auprc, r.test.auprc_ci) };
            Point { x: r.value.unwrap_or(0.0), y, interval: Some(ci) }
        };
        let series = [("AUROC", true), ("AUPRC", false)]
            .map(|(name, a)| Series { name: name.to_string(), points: runs.iter().map(|r| point(r, a)).collect() });
        let svg = line_chart(&format!("{} ({})", spec.name, spec.model.name()), k, "test metric", &series);
        fs::write(dir.join("summary.svg"), svg)?;
    }
    write_json(&dir.join("audit.json"), &audit(split, &runner.used)?)?;

    let report = ExperimentReport {
        name: spec.name.clone(),
        task: spec.task,
        model: spec.model,
        train_set: spec.train_set,
        eval_set: spec.eval_set,
        seed: spec.seed,
        registry_hash: meta.registry_hash.clone(),
        sweep: key.map(str::to_string),
        stages: runner.stages,
        runs,
        optimal,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Creates `{out}/{name}/{timestamp}-{seed}`, runs the experiment there and
/// points `{out}/{name}/latest` at it.
pub fn run_experiment(spec: &ExperimentSpec, dataset: &Path, out: &Path) -> Result<ExperimentOutput> {
    spec.validate()?;
    let (meta, split) = load_dataset(dataset)?;
    let parent = out.join(&spec.name);
    fs::create_dir_all(&parent)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mut run_name = format!("{stamp}-{}", spec.seed);
    let mut k = 1;
    while parent.join(&run_name).exists() {
        run_name = format!("{stamp}-{}-{k}", spec.seed);
        k += 1;
    }
    let run_dir = parent.join(&run_name);
    let report = run_experiment_in(spec, &meta, &split, &run_dir)?;
    fs::write(parent.join(LATEST_FILE), format!("{run_name}\n"))?;
    Ok(ExperimentOutput { run_dir, report })
}

/// Recomputes a sub-run's test metrics from the checkpoints it names.
pub fn reevaluate(run_dir: &Path, record: &EvalRecord, split: &DatasetSplit) -> Result<MetricsReport> {
    let load = |rel: &str| -> Result<(Model, TrainConfig)> {
        let ck = Checkpoint::load(&run_dir.join(rel))?;
        let cfg = ck.meta.train.clone().unwrap_or_default();
        Ok((ck.into_model()?, cfg))
    };
    let (model, cfg) = load(&record.checkpoint)?;
    let eval_cfg = TrainConfig { stage: Stage::FinetuneFusion, ..cfg };
    match &record.unimodal_checkpoint {
        Some(rel) => {
            let (uni, _) = load(rel)?;
            let p = Predictor::Ensemble { unimodal: &uni, fusion: &model };
            evaluate(p, split, record.split, record.set, record.drop_rate, &eval_cfg)
        }
        None => evaluate(Predictor::Single(&model), split, record.split, record.set, record.drop_rate, &eval_cfg),
    }
}
