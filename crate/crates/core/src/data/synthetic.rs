//! Latent-factor generator for partially paired synthetic datasets.
//!
//! Every subject draws an EHR latent `z_e` and an image latent `z_c`. The
//! event stream is driven by `z_e`, the image by `z_c`, radiology labels by
//! `z_c` alone and task labels by `z_e + ρ·z_c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::discretize::{discretize, Event, EventValue, RawTimeSeries};
use super::instance::{replicate_channels, CxrSample, MultimodalInstance};
use super::registry::{VariableKind, VariableRegistry};
use super::split::{split_by_subject, split_cxr_by_subject, DatasetSplit, SplitFractions, SplitName};
use crate::autograd::Tensor;
use crate::config::{Task, RADIOLOGY_LABELS};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 4;
const MAX_ATTEMPTS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub missing_image_rate: f64,
    pub cross_modal_signal: f64,
    pub task: Task,
    pub seed: u64,
    pub image_size: usize,
    /// Extra subjects that only have an image and radiology labels.
    pub n_cxr_only: usize,
    /// Label noise as a fraction of the latent score spread.
    pub label_noise: f64,
    /// Probability that a subject has a second stay.
    pub repeat_stay_rate: f64,
    pub fractions: SplitFractions,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 200,
            missing_image_rate: 0.6,
            cross_modal_signal: 0.8,
            task: Task::Phenotyping,
            seed: 0,
            image_size: 32,
            n_cxr_only: 0,
            label_noise: 0.2,
            repeat_stay_rate: 0.1,
            fractions: SplitFractions::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_subjects < 30 {
            problems.push(format!("n_subjects {} is below 30", self.n_subjects));
        }
        if !(0.0..1.0).contains(&self.missing_image_rate) {
            problems.push(format!("missing_image_rate {} not in [0, 1)", self.missing_image_rate));
        }
        if !(0.0..=1.0).contains(&self.cross_modal_signal) {
            problems.push(format!("cross_modal_signal {} not in [0, 1]", self.cross_modal_signal));
        }
        if self.image_size < 8 {
            problems.push(format!("image_size {} is below 8", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.repeat_stay_rate) {
            problems.push(format!("repeat_stay_rate {} not in [0, 1]", self.repeat_stay_rate));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            problems.push(format!("label_noise {} must be non-negative", self.label_noise));
        }
        if let Err(e) = self.fractions.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub z_e: [f64; LATENT_DIM],
    pub z_c: [f64; LATENT_DIM],
}

#[derive(Clone, Debug)]
struct LabelModel {
    ehr: Vec<[f64; LATENT_DIM]>,
    cxr: Vec<[f64; LATENT_DIM]>,
    thresholds: Vec<f64>,
    noise: Vec<f64>,
}

impl LabelModel {
    fn sample(&self, z: &Latents, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.thresholds.len())
            .map(|l| {
                let s = self.score(z, l) + self.noise[l] * normal(rng);
                f64::from(s > self.thresholds[l])
            })
            .collect()
    }

    fn score(&self, z: &Latents, l: usize) -> f64 {
        dot(&self.ehr[l], &z.z_e) + dot(&self.cxr[l], &z.z_c)
    }
}

/// Fixed generative parameters shared by all subjects of one dataset.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    task: LabelModel,
    radiology: LabelModel,
    loadings: Vec<[f64; LATENT_DIM]>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn dot(a: &[f64; LATENT_DIM], b: &[f64; LATENT_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_vector(rng: &mut impl Rng) -> [f64; LATENT_DIM] {
    let mut v = [0.0; LATENT_DIM];
    v.iter_mut().for_each(|x| *x = normal(rng));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.map(|x| x / norm)
}

impl SyntheticWorld {
    pub fn new(task: Task, rho: f64, label_noise: f64, n_variables: usize, rng: &mut impl Rng) -> Self {
        let n = task.label_count();
        let spread = (1.0 + rho * rho).sqrt();
        let task_model = LabelModel {
            ehr: (0..n).map(|_| unit_vector(rng)).collect(),
            cxr: (0..n).map(|_| unit_vector(rng).map(|x| rho * x)).collect(),
            // Prevalence between roughly 10% and 45%.
            thresholds: (0..n).map(|_| spread * rng.random_range(0.1..1.3)).collect(),
            noise: vec![label_noise * spread; n],
        };
        let radiology = LabelModel {
            ehr: vec![[0.0; LATENT_DIM]; RADIOLOGY_LABELS],
            cxr: (0..RADIOLOGY_LABELS).map(|_| unit_vector(rng)).collect(),
            thresholds: (0..RADIOLOGY_LABELS).map(|_| rng.random_range(0.1..1.0)).collect(),
            noise: vec![label_noise; RADIOLOGY_LABELS],
        };
        let loadings = (0..n_variables)
            .map(|_| unit_vector(rng).map(|x| 1.2 * x))
            .collect();
        SyntheticWorld {
            task: task_model,
            radiology,
            loadings,
        }
    }

    pub fn draw_latents(&self, rng: &mut impl Rng) -> Latents {
        let mut z = Latents {
            z_e: [0.0; LATENT_DIM],
            z_c: [0.0; LATENT_DIM],
        };
        z.z_e.iter_mut().for_each(|x| *x = normal(rng));
        z.z_c.iter_mut().for_each(|x| *x = normal(rng));
        z
    }

    pub fn task_labels(&self, z: &Latents, rng: &mut impl Rng) -> Vec<f64> {
        self.task.sample(z, rng)
    }

    pub fn radiology_labels(&self, z: &Latents, rng: &mut impl Rng) -> Vec<f64> {
        self.radiology.sample(z, rng)
    }

    /// Noise-free task score for label `l`.
    pub fn task_score(&self, z: &Latents, l: usize) -> f64 {
        self.task.score(z, l)
    }

    /// Irregular events over `[0, hours)`, driven by `z_e`.
    pub fn events(&self, z: &Latents, hours: f64, registry: &VariableRegistry, rng: &mut impl Rng) -> RawTimeSeries {
        let mut events = Vec::new();
        for (idx, var) in registry.variables.iter().enumerate() {
            let drive = dot(&self.loadings[idx], &z.z_e);
            let rate = if var.is_categorical() { 0.15 } else { 0.3 };
            for hour in 0..hours.ceil() as usize {
                if rng.random::<f64>() >= rate {
                    continue;
                }
                let time = (hour as f64 + rng.random::<f64>()).min(hours - 1e-6);
                let value = match &var.kind {
                    VariableKind::Continuous { mean, std, .. } => {
                        EventValue::Numeric(mean + std * (drive + 0.35 * normal(rng)))
                    }
                    VariableKind::Categorical { categories, normal: n } => {
                        let shift = (1.5 * drive + 0.5 * normal(rng)).round() as i64;
                        let top = categories.len() as i64 - 1;
                        EventValue::Category((*n as i64 + shift).clamp(0, top) as usize)
                    }
                };
                events.push(Event {
                    time,
                    variable: idx,
                    value,
                });
            }
        }
        RawTimeSeries { events }
    }

    /// Single-channel `size×size` image whose texture encodes `z_c`:
    /// brightness, horizontal stripes, vertical stripes and rings. Stripe and
    /// ring amplitudes are positive so they survive flips and shifts.
    pub fn image(&self, z: &Latents, size: usize, rng: &mut impl Rng) -> Tensor {
        let c = &z.z_c;
        let amp = |v: f64| 0.5 * (0.4 * v).exp();
        let mid = (size as f64 - 1.0) / 2.0;
        let period = (size as f64 / 4.0).max(3.0);
        let tau = std::f64::consts::TAU;
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let r = ((fy - mid).powi(2) + (fx - mid).powi(2)).sqrt();
                let v = 0.5 * c[0]
                    + amp(c[1]) * (tau * fy / period).cos()
                    + amp(c[2]) * (tau * fx / period).cos()
                    + amp(c[3]) * (tau * r / period).cos()
                    + 0.2 * normal(rng);
                data.push(v);
            }
        }
        Tensor::new([1, size, size], data).expect("image shape")
    }
}

fn stay_hours(task: Task, rng: &mut impl Rng) -> f64 {
    match task.horizon_hours() {
        Some(h) => h,
        None => rng.random_range(12.0..48.0),
    }
}

/// Builds a partially paired dataset split by subject. Regenerates with a
/// fresh random stream when some split has no label with both classes, and
/// gives up after five attempts.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    generate_synthetic_with(cfg, &VariableRegistry::default_registry())
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig, registry: &VariableRegistry) -> Result<DatasetSplit> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let split = generate_attempt(cfg, registry, attempt)?;
        match degenerate_split(&split) {
            None => return Ok(split),
            Some(name) => log::warn!(
                "synthetic attempt {} has single-class labels throughout the {} split; regenerating",
                attempt + 1,
                name.as_str()
            ),
        }
    }
    Err(Error::invalid(format!(
        "synthetic configuration stays degenerate after {MAX_ATTEMPTS} attempts"
    )))
}

fn generate_attempt(cfg: &SyntheticConfig, registry: &VariableRegistry, attempt: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(attempt);
    let world = SyntheticWorld::new(
        cfg.task,
        cfg.cross_modal_signal,
        cfg.label_noise,
        registry.len(),
        &mut rng,
    );

    let mut instances = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let z = world.draw_latents(&mut rng);
        let stays = if rng.random::<f64>() < cfg.repeat_stay_rate { 2 } else { 1 };
        for k in 0..stays {
            let hours = stay_hours(cfg.task, &mut rng);
            let raw = world.events(&z, hours, registry, &mut rng);
            let x_ehr = discretize(&raw, cfg.task.horizon_hours(), registry)?;
            let y_task = world.task_labels(&z, &mut rng);
            let y_cxr = world.radiology_labels(&z, &mut rng);
            let image = replicate_channels(&world.image(&z, cfg.image_size, &mut rng))?;
            let paired = rng.random::<f64>() >= cfg.missing_image_rate;
            let age = (55.0 + 15.0 * z.z_e[1]).clamp(18.0, 95.0);
            instances.push(MultimodalInstance {
                instance_id: format!("s{s:05}-{k}"),
                subject_id: format!("s{s:05}"),
                task: cfg.task,
                x_ehr,
                x_cxr: paired.then_some(image),
                y_task,
                y_cxr: paired.then_some(y_cxr),
                age: Some(age.round()),
            });
        }
    }

    let mut cxr_only = Vec::with_capacity(cfg.n_cxr_only);
    for s in 0..cfg.n_cxr_only {
        let z = world.draw_latents(&mut rng);
        let labels = world.radiology_labels(&z, &mut rng);
        let image = replicate_channels(&world.image(&z, cfg.image_size, &mut rng))?;
        cxr_only.push(CxrSample {
            sample_id: format!("c{s:05}"),
            subject_id: format!("c{s:05}"),
            image,
            labels,
        });
    }

    let split_seed = rng.random::<u64>();
    let mut split = split_by_subject(instances, cfg.fractions, split_seed)?;
    let [train, val, test] = split_cxr_by_subject(cxr_only, cfg.fractions, split_seed)?;
    split.cxr_train = train;
    split.cxr_val = val;
    split.cxr_test = test;
    Ok(split)
}

/// First split in which every task label column is single-class.
fn degenerate_split(split: &DatasetSplit) -> Option<SplitName> {
    SplitName::ALL.into_iter().find(|&name| {
        let part = split.part(name);
        let Some(first) = part.first() else {
            return true;
        };
        (0..first.y_task.len()).all(|l| {
            let v = part[0].y_task[l];
            part.iter().all(|i| i.y_task[l] == v)
        })
    })
}
