//! Ranking metrics, bootstrap intervals and report assembly.

pub mod bootstrap;
mod ensemble;
pub mod metrics;
pub mod report;

pub use bootstrap::{bootstrap, bootstrap_ci, BootstrapResult};
pub use ensemble::ensemble_predict;
pub use metrics::{auprc, auroc};
pub use report::{
    macro_auroc, macro_metrics, per_label_csv, subgroup_report, Grouping, LabelMetrics, MetricsReport,
    ReportOptions,
};
