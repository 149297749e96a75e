use medfuse_core::data::{generate_synthetic, Latents, SplitName, SyntheticConfig, SyntheticWorld};
use medfuse_core::eval::{auroc, bootstrap_ci};
use medfuse_core::harness::{select, SetKind};
use medfuse_core::training::{run_stage, stage_examples, InitMode, Pretrained, Stage, TrainConfig};
use medfuse_core::{ModelConfig, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(z: &Latents) -> Vec<f64> {
    z.z_e.iter().chain(&z.z_c).copied().chain([1.0]).collect()
}

/// Plain batch gradient descent on the logistic loss.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    for _ in 0..300 {
        let mut g = vec![0.0; d];
        for (xi, yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
            let err = 1.0 / (1.0 + (-z).exp()) - yi;
            g.iter_mut().zip(xi).for_each(|(gj, xj)| *gj += err * xj);
        }
        w.iter_mut().zip(&g).for_each(|(wj, gj)| *wj -= 0.5 * gj / x.len() as f64);
    }
    w
}

#[test]
fn latent_probe_finds_the_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let world = SyntheticWorld::new(Task::Phenotyping, 0.8, 0.2, 17, &mut rng);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (0..n)
            .map(|_| {
                let z = world.draw_latents(rng);
                (features(&z), world.task_labels(&z, rng))
            })
            .unzip()
    };
    let (xtr, ytr) = draw(3000, &mut rng);
    let (xte, yte) = draw(3000, &mut rng);
    let mut aucs = Vec::new();
    for l in 0..Task::Phenotyping.label_count() {
        let y: Vec<f64> = ytr.iter().map(|r| r[l]).collect();
        let w = fit_logistic(&xtr, &y);
        let s: Vec<f64> = xte.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let t: Vec<f64> = yte.iter().map(|r| r[l]).collect();
        aucs.push(auroc(&s, &t).unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!(mean > 0.95, "mean probe auroc {mean}, per label {aucs:?}");
}

#[test]
fn bootstrap_interval_narrows_with_more_data() {
    let width = |n: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
        let s: Vec<f64> = y.iter().map(|v| v + 1.5 * rng.random_range(-1.0..1.0)).collect();
        let ci = bootstrap_ci(&s, &y, auroc, 300, 0.95, seed).unwrap();
        ci.high - ci.low
    };
    let mut shrink: Vec<f64> = (0..20).map(|seed| width(400, seed) - width(100, seed + 100)).collect();
    shrink.sort_by(f64::total_cmp);
    let median = (shrink[9] + shrink[10]) / 2.0;
    assert!(median <= 0.0, "median width change {median}");
}

#[test]
fn fusion_learns_well_above_chance() {
    let split = generate_synthetic(&SyntheticConfig {
        n_subjects: 600,
        cross_modal_signal: 0.9,
        label_noise: 0.0,
        task: Task::Phenotyping,
        image_size: 16,
        seed: 6,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        stage: Stage::FinetuneFusion,
        init: InitMode::Random,
        learning_rate: 1e-3,
        model: ModelConfig::desk(),
        seed: 6,
        ..TrainConfig::default()
    };
    let val: Vec<_> = select(split.part(SplitName::Val), SetKind::Paired)
        .into_iter()
        .map(medfuse_core::data::Example::from_instance)
        .collect();
    let train = stage_examples(Stage::FinetuneFusion, &split, SplitName::Train);
    let out = run_stage(&cfg, Task::Phenotyping, &train, &val, Pretrained::default()).unwrap();
    assert!(out.epochs_run <= 50);
    assert!(out.best_val_auroc >= 0.7, "best val auroc {} at epoch {}", out.best_val_auroc, out.best_epoch);
}
