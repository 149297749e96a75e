//! Macro-averaged reports with bootstrap intervals and subgroup breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap;
use super::metrics::{auprc, auroc, has_both_classes};
use crate::data::labels::PhenotypeCategory;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<PhenotypeCategory>,
    pub prevalence: f64,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub n_instances: usize,
    pub n_positive: usize,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc_ci: (f64, f64),
    pub n_instances: usize,
    /// Positive entries over all labels.
    pub n_positive: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label: Option<Vec<LabelMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroups: Option<BTreeMap<String, GroupMetrics>>,
    pub skipped_labels: Vec<String>,
    pub bootstrap_skipped: usize,
    pub warnings: Vec<String>,
}

/// Row-major `N×L` matrices of scores and binary labels.
#[derive(Clone, Copy, Debug)]
pub struct ScoreTable<'a> {
    pub scores: &'a [Vec<f64>],
    pub labels: &'a [Vec<f64>],
}

impl<'a> ScoreTable<'a> {
    pub fn new(scores: &'a [Vec<f64>], labels: &'a [Vec<f64>]) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::dim(format!(
                "{} score rows for {} label rows",
                scores.len(),
                labels.len()
            )));
        }
        let width = labels[0].len();
        if scores.iter().chain(labels).any(|r| r.len() != width) {
            return Err(Error::dim("score and label rows must all have the same width"));
        }
        Ok(ScoreTable { scores, labels })
    }

    pub fn width(&self) -> usize {
        self.labels[0].len()
    }

    fn column(&self, rows: &[usize], l: usize) -> (Vec<f64>, Vec<f64>) {
        rows.iter().map(|&i| (self.scores[i][l], self.labels[i][l])).unzip()
    }

    /// Macro AUROC and AUPRC over the labels with both classes among `rows`.
    fn macro_on(&self, rows: &[usize]) -> Option<(f64, f64)> {
        let (mut ra, mut rp, mut k) = (0.0, 0.0, 0usize);
        for l in 0..self.width() {
            let (s, y) = self.column(rows, l);
            if !has_both_classes(&y) {
                continue;
            }
            ra += auroc(&s, &y).ok()?;
            rp += auprc(&s, &y).ok()?;
            k += 1;
        }
        (k > 0).then(|| (ra / k as f64, rp / k as f64))
    }
}

/// Mean per-label AUROC that skips single-class labels; `None` when no label
/// has both classes.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<Option<f64>> {
    let t = ScoreTable::new(scores, labels)?;
    let rows: Vec<usize> = (0..scores.len()).collect();
    Ok(t.macro_on(&rows).map(|(a, _)| a))
}

#[derive(Clone, Debug)]
pub struct ReportOptions<'a> {
    pub label_names: &'a [String],
    pub categories: Option<&'a [PhenotypeCategory]>,
    pub bootstrap_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

/// Per-label metrics, their unweighted means over labels with both classes,
/// and bootstrap intervals of those means.
pub fn macro_metrics(scores: &[Vec<f64>], labels: &[Vec<f64>], opts: &ReportOptions<'_>) -> Result<MetricsReport> {
    let table = ScoreTable::new(scores, labels)?;
    let width = table.width();
    if opts.label_names.len() != width {
        return Err(Error::dim(format!("{} label names for {width} labels", opts.label_names.len())));
    }
    let rows: Vec<usize> = (0..scores.len()).collect();
    let mut per_label = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for l in 0..width {
        let (s, y) = table.column(&rows, l);
        if !has_both_classes(&y) {
            skipped.push(opts.label_names[l].clone());
            continue;
        }
        per_label.push(LabelMetrics {
            name: opts.label_names[l].clone(),
            category: opts.categories.map(|c| c[l]),
            prevalence: y.iter().sum::<f64>() / y.len() as f64,
            auroc: auroc(&s, &y)?,
            auprc: auprc(&s, &y)?,
        });
    }
    if per_label.is_empty() {
        return Err(Error::UndefinedMetric("every label is single-class".into()));
    }
    if !skipped.is_empty() {
        let w = format!("skipped single-class labels: {}", skipped.join(", "));
        log::warn!("{w}");
        warnings.push(w);
    }
    let k = per_label.len() as f64;
    let point_auroc = per_label.iter().map(|m| m.auroc).sum::<f64>() / k;
    let point_auprc = per_label.iter().map(|m| m.auprc).sum::<f64>() / k;

    let mut pairs = Vec::with_capacity(opts.bootstrap_iterations);
    let boot = bootstrap(rows.len(), opts.bootstrap_iterations, opts.confidence, opts.seed, |idx| {
        let m = table.macro_on(idx);
        if let Some(p) = m {
            pairs.push(p);
        }
        m.map(|(a, _)| a)
    })?;
    let mut ap: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    ap.sort_by(f64::total_cmp);
    let tail = (1.0 - opts.confidence) / 2.0;
    let auprc_ci = (
        super::bootstrap::quantile(&ap, tail),
        super::bootstrap::quantile(&ap, 1.0 - tail),
    );
    if let Some(w) = boot.warning.clone() {
        warnings.push(w);
    }

    Ok(MetricsReport {
        auroc: point_auroc,
        auprc: point_auprc,
        auroc_ci: (boot.low, boot.high),
        auprc_ci,
        n_instances: rows.len(),
        n_positive: labels.iter().flatten().filter(|&&y| y == 1.0).count(),
        per_label: Some(per_label),
        subgroups: None,
        skipped_labels: skipped,
        bootstrap_skipped: boot.skipped,
        warnings,
    })
}

/// Age bands used by the subgroup report.
pub const AGE_BANDS: [(&str, f64, f64); 4] = [
    ("18-40", 18.0, 40.0),
    ("40-60", 40.0, 60.0),
    ("60-80", 60.0, 80.0),
    (">80", 80.0, f64::INFINITY),
];

pub fn age_band(age: f64) -> Option<&'static str> {
    AGE_BANDS
        .iter()
        .find(|(_, lo, hi)| age >= *lo && age < *hi)
        .map(|(name, _, _)| *name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    AgeBands,
    PhenotypeCategory,
}

/// Metrics per group. Age bands partition instances; phenotype categories
/// average the per-label metrics of their member labels. Empty groups are
/// left out with a notice in `warnings`.
pub fn subgroup_report(
    ages: &[Option<f64>],
    scores: &[Vec<f64>],
    labels: &[Vec<f64>],
    grouping: Grouping,
    opts: &ReportOptions<'_>,
) -> Result<MetricsReport> {
    let mut report = macro_metrics(scores, labels, opts)?;
    let table = ScoreTable::new(scores, labels)?;
    let width = table.width();
    let mut groups = BTreeMap::new();
    match grouping {
        Grouping::AgeBands => {
            if ages.len() != scores.len() {
                return Err(Error::dim(format!("{} ages for {} instances", ages.len(), scores.len())));
            }
            for (name, _, _) in AGE_BANDS {
                let rows: Vec<usize> = (0..ages.len())
                    .filter(|&i| ages[i].and_then(age_band) == Some(name))
                    .collect();
                let positives = rows.iter().map(|&i| labels[i].iter().filter(|&&y| y == 1.0).count()).sum();
                match (rows.is_empty(), table.macro_on(&rows)) {
                    (false, Some((a, p))) => {
                        groups.insert(
                            name.to_string(),
                            GroupMetrics {
                                auroc: a,
                                auprc: p,
                                n_instances: rows.len(),
                                n_positive: positives,
                                positive_fraction: positives as f64 / (rows.len() * width) as f64,
                            },
                        );
                    }
                    _ => report.warnings.push(format!("age group {name} omitted: empty or single-class")),
                }
            }
            let missing = ages.iter().filter(|a| a.and_then(age_band).is_none()).count();
            if missing > 0 {
                report.warnings.push(format!("{missing} instances without an age band"));
            }
        }
        Grouping::PhenotypeCategory => {
            let cats = opts
                .categories
                .ok_or_else(|| Error::invalid("phenotype grouping needs label categories"))?;
            let per_label = report.per_label.as_ref().expect("macro report has per-label rows");
            for cat in [PhenotypeCategory::Acute, PhenotypeCategory::Mixed, PhenotypeCategory::Chronic] {
                let members: Vec<&LabelMetrics> = per_label.iter().filter(|m| m.category == Some(cat)).collect();
                if members.is_empty() {
                    report.warnings.push(format!("category {} omitted: no valid labels", cat.name()));
                    continue;
                }
                let k = members.len() as f64;
                let cols: Vec<usize> = (0..width).filter(|&l| cats[l] == cat).collect();
                let positives = labels.iter().map(|r| cols.iter().filter(|&&l| r[l] == 1.0).count()).sum();
                groups.insert(
                    cat.name().to_string(),
                    GroupMetrics {
                        auroc: members.iter().map(|m| m.auroc).sum::<f64>() / k,
                        auprc: members.iter().map(|m| m.auprc).sum::<f64>() / k,
                        n_instances: scores.len(),
                        n_positive: positives,
                        positive_fraction: positives as f64 / (scores.len() * cols.len()) as f64,
                    },
                );
            }
        }
    }
    report.subgroups = Some(groups);
    Ok(report)
}

/// Per-label CSV: `phenotype,type,prevalence,auroc,auprc`.
pub fn per_label_csv(report: &MetricsReport) -> String {
    let mut out = String::from("phenotype,type,prevalence,auroc,auprc\n");
    for m in report.per_label.iter().flatten() {
        let kind = m.category.map_or("", PhenotypeCategory::name);
        let _ = writeln!(
            out,
            "\"{}\",{},{:.4},{:.4},{:.4}",
            m.name, kind, m.prevalence, m.auroc, m.auprc
        );
    }
    out
}
