//! Ranking metrics for binary labels.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("labels must be 0 or 1, found {bad}")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {bad}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        let positives = idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += avg * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_k − R_{k−1})·P_k` over distinct score thresholds,
/// each threshold admitting its whole tie group at once.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("auprc needs at least one positive".into()));
    }
    let idx = descending(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Whether a label column has both classes.
pub fn has_both_classes(labels: &[f64]) -> bool {
    labels.iter().any(|&y| y == 1.0) && labels.iter().any(|&y| y == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3; 5], &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.2], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        let ap = auprc(&[0.5; 8], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((ap - 3.0 / 8.0).abs() < 1e-12);
        // Ranked 1,0,1: precision 1 at recall ½, 2/3 at recall 1.
        let ap = auprc(&[0.9, 0.5, 0.4], &[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(matches!(auprc(&[0.1], &[0.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1.0, 0.5]), Err(Error::Validation(_))));
        assert!(matches!(auroc(&[0.1], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }
}
