use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trainer::TrainOutcome;
use crate::error::{Error, Result};

/// `n` rates drawn log-uniformly from `[lo, hi]`.
pub fn sample_learning_rates(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|_| if b > a { rng.random_range(a..=b).exp() } else { lo })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub learning_rate: f64,
    pub outcome: TrainOutcome,
    /// `(learning rate, best validation AUROC)` of every run, in draw order.
    pub runs: Vec<(f64, f64)>,
}

/// Trains once per sampled rate and keeps the run with the best validation
/// AUROC; ties go to the earlier draw.
pub fn search_learning_rate<F>(rates: &[f64], mut run: F) -> Result<SearchResult>
where
    F: FnMut(f64) -> Result<TrainOutcome>,
{
    let mut best: Option<(f64, TrainOutcome)> = None;
    let mut runs = Vec::with_capacity(rates.len());
    for &lr in rates {
        let out = run(lr)?;
        runs.push((lr, out.best_val_auroc));
        if best.as_ref().is_none_or(|(_, b)| out.best_val_auroc > b.best_val_auroc) {
            best = Some((lr, out));
        }
    }
    let (learning_rate, outcome) = best.ok_or_else(|| Error::invalid("no learning rates to search"))?;
    Ok(SearchResult { learning_rate, outcome, runs })
}
