//! Spec-driven experiments: staged training with learning-rate search,
//! sweeps, evaluation reports, plots and model comparison tables.

mod compare;
mod evaluate;
mod experiment;
pub mod plot;
mod spec;

pub use compare::{compare_models, Comparison, ComparisonRow};
pub use evaluate::{drop_images, evaluate, select, Predictor};
pub use experiment::{
    reevaluate, run_experiment, run_experiment_in, EvalRecord, ExperimentOutput, ExperimentReport, StageSummary,
    SubRun, LATEST_FILE, REPORT_FILE,
};
pub use spec::{ExperimentModel, ExperimentSpec, SetKind, Sweep};
