use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use medfuse_core::data::{
    generate_synthetic_with, load_dataset, save_dataset, SplitName, SyntheticConfig, VariableRegistry,
};
use medfuse_core::harness::{compare_models, evaluate, run_experiment, ExperimentSpec, Predictor, SetKind};
use medfuse_core::training::{
    run_stage, sample_learning_rates, search_learning_rate, stage_examples, Checkpoint, CheckpointMeta, InitMode,
    Pretrained, Stage, TrainConfig,
};
use medfuse_core::{Error, Result, Task};

#[derive(Parser)]
#[command(name = "medfuse", version, about = "Multimodal fusion of clinical time series and chest X-rays")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Phenotyping,
    Mortality,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    Paired,
    Partial,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to disk.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 200)]
        subjects: usize,
        /// Probability that an instance has no image.
        #[arg(long, default_value_t = 0.6)]
        missing_rate: f64,
        /// Weight of image-derived information in the task labels.
        #[arg(long, default_value_t = 0.8)]
        signal: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Extra image-only subjects for encoder pretraining.
        #[arg(long, default_value_t = 0)]
        cxr_only: usize,
        #[arg(long, default_value_t = 0.2)]
        label_noise: f64,
        /// Variable registry file; defaults to the built-in layout.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Train one stage and save its best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, default_value = "model.mfck")]
        out: PathBuf,
        /// Sample `lr_search_runs` learning rates instead of using `learning_rate`.
        #[arg(long)]
        search: bool,
    },
    /// Evaluate a checkpoint on a dataset split and print the metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "paired")]
        set: SetArg,
        /// Share of instances whose image is removed before prediction.
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
        /// Time-series model for image-missing instances (ensemble evaluation).
        #[arg(long)]
        unimodal_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment spec: learning-rate search, staged training, sweeps and reports.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run several experiment specs and tabulate their test metrics.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        specs: Vec<PathBuf>,
        #[arg(long, default_value = "data")]
        dataset: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io_at(path, e))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    task: TaskArg,
    subjects: usize,
    missing_rate: f64,
    signal: f64,
    seed: u64,
    out: &Path,
    image_size: usize,
    cxr_only: usize,
    label_noise: f64,
    registry: Option<&Path>,
) -> Result<()> {
    let registry = match registry {
        Some(p) => VariableRegistry::load(p)?,
        None => VariableRegistry::default_registry(),
    };
    let task = match task {
        TaskArg::Phenotyping => Task::Phenotyping,
        TaskArg::Mortality => Task::Mortality,
    };
    let cfg = SyntheticConfig {
        n_subjects: subjects,
        missing_image_rate: missing_rate,
        cross_modal_signal: signal,
        task,
        seed,
        image_size,
        n_cxr_only: cxr_only,
        label_noise,
        ..SyntheticConfig::default()
    };
    let split = generate_synthetic_with(&cfg, &registry)?;
    let meta = save_dataset(out, &split, task, &registry.hash, Some(&cfg))?;
    println!("{}", serde_json::to_string_pretty(&meta)?);
    Ok(())
}

fn train(config: &Path, dataset: &Path, out: &Path, search: bool) -> Result<()> {
    let cfg = read_config(config)?;
    cfg.validate()?;
    let (meta, split) = load_dataset(dataset)?;
    let load = |p: &Option<PathBuf>| -> Result<Option<medfuse_core::ParamStore>> {
        p.as_ref().map(|p| Checkpoint::load(p).map(|c| c.store)).transpose()
    };
    let (ehr, cxr) = if cfg.stage == Stage::FinetuneFusion && cfg.init == InitMode::Pretrained {
        (load(&cfg.ehr_checkpoint)?, load(&cfg.cxr_checkpoint)?)
    } else {
        (None, None)
    };
    let pre = Pretrained { ehr: ehr.as_ref(), cxr: cxr.as_ref() };
    let train = stage_examples(cfg.stage, &split, SplitName::Train);
    let val = stage_examples(cfg.stage, &split, SplitName::Val);
    let rates = if search {
        sample_learning_rates(cfg.lr_search_runs.max(1), cfg.lr_min, cfg.lr_max, cfg.seed)
    } else {
        vec![cfg.learning_rate]
    };
    let result = search_learning_rate(&rates, |lr| {
        log::info!("training with learning rate {lr:.3e}");
        run_stage(&TrainConfig { learning_rate: lr, ..cfg.clone() }, meta.task, &train, &val, pre)
    })?;
    let o = &result.outcome;
    Checkpoint::new(
        &o.model,
        CheckpointMeta {
            spec: o.model.spec.clone(),
            train: Some(TrainConfig { learning_rate: result.learning_rate, ..cfg.clone() }),
            registry_hash: meta.registry_hash.clone(),
            best_val_auroc: o.best_val_auroc,
            best_epoch: o.best_epoch,
        },
    )
    .save(out)?;
    let summary = serde_json::json!({
        "checkpoint": out,
        "learning_rate": result.learning_rate,
        "lr_runs": result.runs,
        "best_val_auroc": o.best_val_auroc,
        "best_epoch": o.best_epoch,
        "epochs_run": o.epochs_run,
        "history": o.history,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    split: SplitArg,
    dataset: &Path,
    set: SetArg,
    drop_rate: f64,
    unimodal: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(Error::Validation(format!("drop rate {drop_rate} not in [0, 1]")));
    }
    let (meta, data) = load_dataset(dataset)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.meta.registry_hash != meta.registry_hash {
        log::warn!("checkpoint and dataset were built with different variable registries");
    }
    let cfg = TrainConfig { stage: Stage::FinetuneFusion, ..ck.meta.train.clone().unwrap_or_default() };
    let model = ck.into_model()?;
    if model.spec.task != Some(meta.task) {
        return Err(Error::Validation(format!(
            "checkpoint predicts {}, dataset task is {}",
            model.spec.task.map_or("radiology labels", Task::name),
            meta.task.name()
        )));
    }
    let uni = unimodal.map(|p| Checkpoint::load(p).and_then(Checkpoint::into_model)).transpose()?;
    let predictor = match &uni {
        Some(u) => Predictor::Ensemble { unimodal: u, fusion: &model },
        None => Predictor::Single(&model),
    };
    let split = match split {
        SplitArg::Train => SplitName::Train,
        SplitArg::Val => SplitName::Val,
        SplitArg::Test => SplitName::Test,
    };
    let set = match set {
        SetArg::Paired => SetKind::Paired,
        SetArg::Partial => SetKind::Partial,
    };
    let report = evaluate(predictor, &data, split, set, drop_rate, &cfg)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(p) => fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn experiment(spec: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let spec = ExperimentSpec::from_json(&read_text(spec)?)?;
    let result = run_experiment(&spec, dataset, out)?;
    let head = result.report.headline();
    println!("run directory: {}", result.run_dir.display());
    println!(
        "test auroc {:.3} ({:.3}-{:.3}), auprc {:.3} ({:.3}-{:.3})",
        head.test.auroc, head.test.auroc_ci.0, head.test.auroc_ci.1, head.test.auprc, head.test.auprc_ci.0, head.test.auprc_ci.1
    );
    if let (Some(i), Some(key)) = (result.report.optimal, &result.report.sweep) {
        println!("OPTIMAL {key} = {}", result.report.runs[i].value.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn compare(specs: &[PathBuf], dataset: &Path, out: &Path) -> Result<()> {
    let specs = specs
        .iter()
        .map(|p| ExperimentSpec::from_json(&read_text(p)?))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_models(&specs, dataset, out)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), table.to_csv())?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { task, subjects, missing_rate, signal, seed, out, image_size, cxr_only, label_noise, registry } => {
            gen_data(task, subjects, missing_rate, signal, seed, &out, image_size, cxr_only, label_noise, registry.as_deref())
        }
        Command::Train { config, dataset, out, search } => train(&config, &dataset, &out, search),
        Command::Eval { checkpoint, split, dataset, set, drop_rate, unimodal_checkpoint, out } => eval(
            &checkpoint,
            split,
            &dataset,
            set,
            drop_rate,
            unimodal_checkpoint.as_deref(),
            out.as_deref(),
        ),
        Command::Experiment { spec, dataset, out } => experiment(&spec, &dataset, &out),
        Command::Compare { specs, dataset, out } => compare(&specs, &dataset, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
