use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam};
use super::config::{InitMode, Stage, TrainConfig};
use super::loss::bce_loss;
use crate::autograd::{Graph, ParamStore};
use crate::config::{ModelConfig, Task};
use crate::data::{augment_image, replicate_channels, AugmentConfig, AugmentMode, DatasetSplit, Example, SplitName};
use crate::error::{Error, Result};
use crate::eval::macro_auroc;
use crate::model::{Architecture, Model, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUROC.
    pub model: Model,
    pub best_val_auroc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

/// Mixes a run seed with two counters into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Brings an image to the encoder's channel count and resolution, with random
/// augmentation in train mode.
pub fn prepare_image(
    img: &crate::Tensor,
    cfg: &ModelConfig,
    aug: &AugmentConfig,
    mode: AugmentMode,
    rng: &mut ChaCha8Rng,
) -> Result<crate::Tensor> {
    let img = match (img.shape().first(), cfg.image_channels) {
        (Some(1), 3) => replicate_channels(img)?,
        _ => img.clone(),
    };
    augment_image(&img, mode, aug, rng)
}

/// Copies `examples` with every image run through the evaluation transform.
pub fn prepare_eval(examples: &[Example], cfg: &ModelConfig) -> Result<Vec<Example>> {
    let aug = AugmentConfig::for_resolution(cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    examples
        .iter()
        .map(|e| {
            Ok(Example {
                image: match &e.image {
                    Some(img) => Some(prepare_image(img, cfg, &aug, AugmentMode::Eval, &mut rng)?),
                    None => None,
                },
                ..e.clone()
            })
        })
        .collect()
}

/// Drops image-less examples until `fraction` of them remain; paired examples
/// are always kept and order is preserved.
pub fn subsample_unimodal(examples: &[Example], fraction: f64, seed: u64) -> Vec<Example> {
    let mut unpaired: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].image.is_none()).collect();
    let keep = (fraction * unpaired.len() as f64).round() as usize;
    unpaired.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dropped = vec![false; examples.len()];
    for &i in &unpaired[keep.min(unpaired.len())..] {
        dropped[i] = true;
    }
    examples
        .iter()
        .zip(dropped)
        .filter(|(_, d)| !d)
        .map(|(e, _)| e.clone())
        .collect()
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[Example], grad_clip: f64, seed: u64) -> Result<f64> {
    let targets = model.targets(batch)?;
    let (loss, mut grads) = {
        let g = Graph::new(&model.store, true, seed);
        let loss = bce_loss(&targets, model.logits(&g, batch)?)?;
        let value = loss.to_vec()[0];
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value}")));
        }
        (value, g.backward(loss)?)
    };
    // Parameters the batch never touched (e.g. the missing-image vector on a
    // fully paired batch) still take an Adam step with a zero gradient.
    let mut seen = vec![false; model.store.len()];
    grads.iter().for_each(|(id, _)| seen[id.index()] = true);
    for id in model.store.trainable() {
        if !seen[id.index()] {
            grads.push((id, vec![0.0; model.store.get(id).len()]));
        }
    }
    let norm = clip_global_norm(&mut grads, grad_clip);
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    adam.step(&mut model.store, &grads)?;
    Ok(loss)
}

/// Full-batch steps on a fixed set until the loss drops below `target`;
/// returns the final loss and the number of steps taken.
pub fn fit_batch(model: &mut Model, batch: &[Example], lr: f64, max_steps: usize, target: f64) -> Result<(f64, usize)> {
    let mut adam = Adam::new(lr);
    let mut loss = f64::INFINITY;
    for step in 0..max_steps {
        loss = train_step(model, &mut adam, batch, f64::INFINITY, step as u64)?;
        if loss < target {
            return Ok((loss, step + 1));
        }
    }
    Ok((loss, max_steps))
}

fn validation_auroc(model: &Model, val: &[Example]) -> Result<f64> {
    let scores = model.predict(val)?;
    let labels: Vec<Vec<f64>> = val.iter().map(|e| e.targets.clone()).collect();
    macro_auroc(&scores, &labels)?
        .ok_or_else(|| Error::UndefinedMetric("no validation label has both classes".into()))
}

/// Mini-batch Adam with early stopping on validation macro AUROC. Training
/// stops once `patience` epochs pass without improvement and the best
/// parameters are restored.
pub fn train_model(mut model: Model, cfg: &TrainConfig, train: &[Example], val: &[Example]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mcfg = model.spec.config.clone();
    let uses_images = model.architecture().uses_images();
    let val = if uses_images { prepare_eval(val, &mcfg)? } else { val.to_vec() };
    let aug = if cfg.augment {
        AugmentConfig::for_resolution(mcfg.image_size)
    } else {
        let base = AugmentConfig::for_resolution(mcfg.image_size);
        AugmentConfig::disabled(base.resize, base.crop)
    };
    let mode = if cfg.augment { AugmentMode::Train } else { AugmentMode::Eval };

    let mut adam = Adam::new(cfg.learning_rate);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = idx
                .iter()
                .map(|&i| {
                    let e = &train[i];
                    let image = match &e.image {
                        Some(img) if uses_images => Some(prepare_image(img, &mcfg, &aug, mode, &mut rng)?),
                        _ => None,
                    };
                    Ok(Example { image, ..e.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            let seed = derive_seed(cfg.seed, epoch as u64, b as u64 + 1);
            total += train_step(&mut model, &mut adam, &batch, cfg.grad_clip, seed)? * batch.len() as f64;
        }
        let val_auroc = validation_auroc(&model, &val)?;
        let train_loss = total / train.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.4}, val auroc {val_auroc:.4}");
        history.push(EpochRecord { epoch, train_loss, val_auroc });
        if best.as_ref().is_none_or(|(a, _, _)| val_auroc > *a) {
            best = Some((val_auroc, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_val_auroc, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_val_auroc,
        best_epoch,
        epochs_run: history.len(),
        history,
    })
}

/// Pretrained encoder weights available to the fine-tuning stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pretrained<'a> {
    pub ehr: Option<&'a ParamStore>,
    pub cxr: Option<&'a ParamStore>,
}

/// Network trained by a stage of the pipeline.
pub fn stage_spec(cfg: &TrainConfig, task: Task) -> ModelSpec {
    let (architecture, task) = match cfg.stage {
        Stage::PretrainEhr => (Architecture::LstmUni, Some(task)),
        Stage::PretrainCxr => (Architecture::CxrUni, None),
        Stage::FinetuneFusion => (cfg.architecture, Some(task)),
    };
    ModelSpec {
        architecture,
        config: cfg.model.clone(),
        task,
        missing_vector_mode: cfg.missing_vector_mode,
        init_seed: cfg.seed,
    }
}

/// Examples a stage trains and validates on: time series only, the image pool
/// with radiology labels, or full instances with task labels.
pub fn stage_examples(stage: Stage, split: &DatasetSplit, part: SplitName) -> Vec<Example> {
    match stage {
        Stage::PretrainEhr => split
            .part(part)
            .iter()
            .map(|i| Example { image: None, ..Example::from_instance(i) })
            .collect(),
        Stage::PretrainCxr => split.cxr_pool(part).iter().map(Example::from_cxr).collect(),
        Stage::FinetuneFusion => split.part(part).iter().map(Example::from_instance).collect(),
    }
}

/// Builds the stage's model, transfers pretrained encoders when fine-tuning,
/// applies the uni-modal subsampling and trains.
pub fn run_stage(cfg: &TrainConfig, task: Task, train: &[Example], val: &[Example], pretrained: Pretrained<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(stage_spec(cfg, task))?;
    if cfg.stage != Stage::FinetuneFusion {
        return train_model(model, cfg, train, val);
    }
    if cfg.init == InitMode::Pretrained {
        let (Some(ehr), Some(cxr)) = (pretrained.ehr, pretrained.cxr) else {
            return Err(Error::invalid("pretrained initialization needs both encoder checkpoints"));
        };
        model.load_pretrained(ehr, "ehr.")?;
        model.load_pretrained(cxr, "cxr.")?;
    }
    let train = subsample_unimodal(train, cfg.unimodal_fraction, derive_seed(cfg.seed, u64::MAX, 0));
    train_model(model, cfg, &train, val)
}
