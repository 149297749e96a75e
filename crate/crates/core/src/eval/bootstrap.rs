//! Percentile bootstrap over resampled instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub low: f64,
    pub high: f64,
    /// Metric value of every non-degenerate resample, in iteration order.
    #[serde(skip)]
    pub values: Vec<f64>,
    pub skipped: usize,
    pub iterations: usize,
    pub warning: Option<String>,
}

/// Linear-interpolation quantile of sorted values, `q ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resamples `n` indices with replacement `iterations` times and evaluates
/// `metric` on each resample; `None` marks a degenerate resample, which is
/// skipped and counted. Iteration `i` draws from its own stream of `seed`,
/// so results do not depend on evaluation order.
pub fn bootstrap<F>(n: usize, iterations: usize, confidence: f64, seed: u64, mut metric: F) -> Result<BootstrapResult>
where
    F: FnMut(&[usize]) -> Option<f64>,
{
    if n == 0 || iterations == 0 {
        return Err(Error::invalid("bootstrap needs instances and iterations"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} not in (0, 1)")));
    }
    let mut values = Vec::with_capacity(iterations);
    let mut idx = vec![0; n];
    for i in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        idx.iter_mut().for_each(|k| *k = rng.random_range(0..n));
        if let Some(v) = metric(&idx) {
            values.push(v);
        }
    }
    let skipped = iterations - values.len();
    if values.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "all {iterations} bootstrap resamples were degenerate"
        )));
    }
    let warning = (2 * skipped > iterations).then(|| {
        format!("{skipped} of {iterations} bootstrap resamples were degenerate; interval is unreliable")
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    Ok(BootstrapResult {
        low: quantile(&sorted, tail),
        high: quantile(&sorted, 1.0 - tail),
        values,
        skipped,
        iterations,
        warning,
    })
}

/// Bootstrap interval of a single-label metric such as [`auroc`](super::auroc).
pub fn bootstrap_ci<M>(
    scores: &[f64],
    labels: &[f64],
    metric: M,
    iterations: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapResult>
where
    M: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut s, mut y) = (Vec::with_capacity(scores.len()), Vec::with_capacity(scores.len()));
    bootstrap(scores.len(), iterations, confidence, seed, |idx| {
        s.clear();
        y.clear();
        s.extend(idx.iter().map(|&i| scores[i]));
        y.extend(idx.iter().map(|&i| labels[i]));
        metric(&s, &y).ok()
    })
}
