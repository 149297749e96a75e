use std::collections::HashSet;

use medfuse_core::data::{
    discretize, split_by_subject, Event, EventValue, Example, MultimodalInstance, RawTimeSeries, SplitFractions,
    VariableKind, VariableRegistry,
};
use medfuse_core::encoders::EhrEncoder;
use medfuse_core::eval::{auprc, auroc};
use medfuse_core::fusion::sequence_lengths;
use medfuse_core::{Architecture, Graph, MissingVectorMode, Model, ModelConfig, ModelSpec, ParamStore, Task, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=12)
        .prop_flat_map(|n| (prop::collection::vec(0u8..6, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, y)| y.contains(&true) && y.contains(&false))
        .prop_map(|(s, y)| {
            (
                s.into_iter().map(|v| f64::from(v) / 5.0).collect(),
                y.into_iter().map(f64::from).collect(),
            )
        })
}

/// Area under the ROC polyline through every distinct threshold.
fn trapezoid_auroc(s: &[f64], y: &[f64]) -> f64 {
    let pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
    let neg = y.len() as f64 - pos;
    let mut t: Vec<f64> = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for th in t {
        let tp = (0..s.len()).filter(|&i| s[i] >= th && y[i] == 1.0).count() as f64;
        let fp = (0..s.len()).filter(|&i| s[i] >= th && y[i] == 0.0).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

proptest! {
    #[test]
    fn auroc_matches_roc_trapezoid((s, y) in scored()) {
        prop_assert!((auroc(&s, &y).unwrap() - trapezoid_auroc(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms((s, y) in scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let t: Vec<f64> = s.iter().map(|x| (a * x + b).exp() + x.powi(3)).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        prop_assert_eq!(auprc(&s, &y).unwrap(), auprc(&t, &y).unwrap());
    }

    #[test]
    fn all_ties_auprc_is_prevalence(y in prop::collection::vec(any::<bool>(), 1..400), v in -1.0f64..1.0) {
        prop_assume!(y.contains(&true));
        let labels: Vec<f64> = y.iter().map(|&b| f64::from(b)).collect();
        let pi = labels.iter().sum::<f64>() / labels.len() as f64;
        prop_assert!((auprc(&vec![v; labels.len()], &labels).unwrap() - pi).abs() < 1e-12);
    }
}

fn random_events(seed: u64, n: usize, reg: &VariableRegistry) -> RawTimeSeries {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..n)
        .map(|_| {
            let variable = rng.random_range(0..reg.len());
            let value = match &reg.variables[variable].kind {
                VariableKind::Continuous { mean, std, .. } => EventValue::Numeric(mean + std * rng.random_range(-3.0..3.0)),
                VariableKind::Categorical { categories, .. } => EventValue::Category(rng.random_range(0..categories.len())),
            };
            Event { time: rng.random_range(0.0..60.0), variable, value }
        })
        .collect();
    RawTimeSeries { events }
}

proptest! {
    #[test]
    fn discretized_rows_are_76_wide_with_monotone_masks(seed in any::<u64>(), n in 0usize..80, mortality in any::<bool>()) {
        let reg = VariableRegistry::default_registry();
        let horizon = mortality.then_some(48.0);
        let x = discretize(&random_events(seed, n, &reg), horizon, &reg).unwrap();
        prop_assert_eq!(x.shape()[1], 76);
        if mortality {
            prop_assert_eq!(x.shape()[0], 24);
        }
        prop_assert!(x.data().iter().all(|v| v.is_finite()));
        for var in &reg.variables {
            let m: Vec<f64> = x.data().chunks(76).map(|r| r[var.mask_column]).collect();
            prop_assert!(m.iter().all(|&b| b == 0.0 || b == 1.0));
            prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
            if var.is_categorical() {
                for r in x.data().chunks(76) {
                    prop_assert_eq!(r[var.columns.clone()].iter().sum::<f64>(), 1.0);
                }
            }
        }
    }

    #[test]
    fn subjects_never_straddle_splits(subjects in prop::collection::vec(0u32..40, 10..120), seed in any::<u64>()) {
        let instances: Vec<MultimodalInstance> = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| MultimodalInstance {
                instance_id: format!("i{i}"),
                subject_id: format!("s{s}"),
                task: Task::Mortality,
                x_ehr: Tensor::zeros([1, 76]),
                x_cxr: None,
                y_task: vec![0.0],
                y_cxr: None,
                age: None,
            })
            .collect();
        let distinct = subjects.iter().collect::<HashSet<_>>().len();
        prop_assume!(distinct >= 3);
        let split = split_by_subject(instances, SplitFractions::default(), seed).unwrap();
        let ids = |v: &[MultimodalInstance]| v.iter().map(|i| i.subject_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (ids(&split.train), ids(&split.val), ids(&split.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), subjects.len());
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        ehr_hidden: 5,
        ehr_dropout: 0.3,
        image_size: 8,
        cxr_widths: vec![2],
        cxr_features: 4,
        fusion_hidden: 3,
        concat_hidden: 3,
        ..ModelConfig::desk()
    }
}

fn batch(seed: u64, lens: &[usize], images: &[bool]) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lens.iter()
        .zip(images)
        .enumerate()
        .map(|(i, (&t, &img))| Example {
            id: format!("e{i}"),
            ehr: Some(Tensor::uniform([t, 76], 2.0, &mut rng)),
            image: img.then(|| Tensor::uniform([3, 8, 8], 1.0, &mut rng)),
            targets: vec![0.0],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn time_series_encoding_follows_batch_permutation(lens in prop::collection::vec(1usize..9, 1..7), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let enc = EhrEncoder::new(&mut store, "ehr", &small_config(), &mut ChaCha8Rng::seed_from_u64(seed));
        let ex = batch(seed, &lens, &vec![false; lens.len()]);
        let xs: Vec<&Tensor> = ex.iter().map(|e| e.ehr.as_ref().unwrap()).collect();
        let g = Graph::new(&store, false, 0);
        let out = enc.encode(&g, &xs).unwrap().to_vec();
        let rev: Vec<&Tensor> = xs.iter().rev().copied().collect();
        let out_rev = enc.encode(&g, &rev).unwrap().to_vec();
        let h = enc.out_features();
        let n = lens.len();
        for i in 0..n {
            prop_assert_eq!(&out[i * h..(i + 1) * h], &out_rev[(n - 1 - i) * h..(n - i) * h]);
        }
    }

    #[test]
    fn fusion_paths_give_probabilities(images in prop::collection::vec(any::<bool>(), 1..6), seed in any::<u64>()) {
        let lens: Vec<usize> = (0..images.len()).map(|i| 1 + i % 4).collect();
        let ex = batch(seed, &lens, &images);
        let seq = sequence_lengths(&ex);
        for (e, l) in ex.iter().zip(&seq) {
            prop_assert_eq!(*l, if e.image.is_some() { 2 } else { 1 });
        }
        for arch in [Architecture::MedFuse, Architecture::Early, Architecture::Joint] {
            let model = Model::new(ModelSpec {
                architecture: arch,
                config: small_config(),
                task: Some(Task::Mortality),
                missing_vector_mode: MissingVectorMode::Zeros,
                init_seed: seed,
            })
            .unwrap();
            for p in model.predict(&ex).unwrap().iter().flatten() {
                prop_assert!(*p > 0.0 && *p < 1.0);
            }
        }
    }
}
