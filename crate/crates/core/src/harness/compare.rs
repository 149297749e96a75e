use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, ExperimentReport};
use super::spec::ExperimentSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc: f64,
    pub auprc_ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn from_reports(reports: &[ExperimentReport]) -> Self {
        let rows = reports
            .iter()
            .map(|r| {
                let t = &r.headline().test;
                ComparisonRow {
                    method: r.name.clone(),
                    auroc: t.auroc,
                    auroc_ci: t.auroc_ci,
                    auprc: t.auprc,
                    auprc_ci: t.auprc_ci,
                }
            })
            .collect();
        Comparison { rows }
    }

    /// Rows holding the highest AUROC and AUPRC; ties go to the first row.
    pub fn best(&self) -> (Option<usize>, Option<usize>) {
        let argmax = |f: fn(&ComparisonRow) -> f64| {
            (0..self.rows.len()).fold(None, |best: Option<usize>, i| match best {
                Some(b) if f(&self.rows[b]) >= f(&self.rows[i]) => Some(b),
                _ => Some(i),
            })
        };
        (argmax(|r| r.auroc), argmax(|r| r.auprc))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,auroc,ci,auprc,ci\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3}-{:.3},{:.3},{:.3}-{:.3}",
                r.method, r.auroc, r.auroc_ci.0, r.auroc_ci.1, r.auprc, r.auprc_ci.0, r.auprc_ci.1
            );
        }
        out
    }

    /// Fixed-width table with the best value per metric wrapped in `*`.
    pub fn render(&self) -> String {
        let (ba, bp) = self.best();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>7}  {:<13}  {:>7}  {:<13}\n", "method", "auroc", "ci", "auprc", "ci");
        for (i, r) in self.rows.iter().enumerate() {
            let mark = |v: f64, best: bool| if best { format!("*{v:.3}*") } else { format!("{v:.3}") };
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:<13}  {:>7}  {:<13}",
                r.method,
                mark(r.auroc, ba == Some(i)),
                format!("{:.3}-{:.3}", r.auroc_ci.0, r.auroc_ci.1),
                mark(r.auprc, bp == Some(i)),
                format!("{:.3}-{:.3}", r.auprc_ci.0, r.auprc_ci.1),
            );
        }
        out
    }
}

/// Runs each experiment and tabulates the test metrics side by side.
pub fn compare_models(specs: &[ExperimentSpec], dataset: &Path, out: &Path) -> Result<Comparison> {
    let first = specs.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    for s in specs {
        s.validate()?;
        if s.task != first.task || s.eval_set != first.eval_set {
            return Err(Error::invalid(format!(
                "`{}` evaluates {} on {} data, `{}` on {} / {}",
                s.name,
                s.task.name(),
                s.eval_set.name(),
                first.name,
                first.task.name(),
                first.eval_set.name()
            )));
        }
    }
    let reports = specs
        .iter()
        .map(|s| run_experiment(s, dataset, out).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison::from_reports(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: &str, a: f64, p: f64) -> ComparisonRow {
        ComparisonRow { method: m.into(), auroc: a, auroc_ci: (a - 0.1, a + 0.1), auprc: p, auprc_ci: (p - 0.1, p + 0.1) }
    }

    #[test]
    fn best_marks_match_a_max_scan() {
        let c = Comparison { rows: vec![row("a", 0.7, 0.5), row("b", 0.8, 0.4), row("c", 0.75, 0.45)] };
        assert_eq!(c.best(), (Some(1), Some(0)));
        let text = c.render();
        assert!(text.lines().nth(2).unwrap().contains("*0.800*"));
        assert!(text.lines().nth(1).unwrap().contains("*0.500*"));
        assert_eq!(text.matches('*').count(), 4);
        assert!(c.to_csv().starts_with("method,auroc,ci,auprc,ci\n"));
    }

    #[test]
    fn identical_rows_render_identically() {
        let c = Comparison { rows: vec![row("m", 0.7, 0.5), row("m", 0.7, 0.5)] };
        let lines: Vec<String> = c.to_csv().lines().map(String::from).collect();
        assert_eq!(lines[1], lines[2]);
    }
}
