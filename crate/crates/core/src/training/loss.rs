use crate::autograd::{Tensor, Var};
use crate::error::Result;

/// Mean binary cross-entropy in the stable logit form
/// `max(ℓ,0) − ℓ·y + ln(1 + e^{−|ℓ|})`. Targets must be 0 or 1.
pub fn bce_loss<'g>(targets: &Tensor, logits: Var<'g>) -> Result<Var<'g>> {
    logits.bce_with_logits(targets)
}

/// Value of [`bce_loss`] without building a graph.
pub fn bce_value(targets: &[f64], logits: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&l, &y)| crate::autograd::bce_term(l, y))
        .sum();
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &[f64], l: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new([l.len()], l.to_vec()).unwrap());
        Ok(bce_loss(&Tensor::new([y.len()], y.to_vec()).unwrap(), logits)?.to_vec()[0])
    }

    #[test]
    fn closed_forms() {
        let confident = loss(&[1.0], &[20.0]).unwrap();
        assert!(confident > 0.0 && (confident - 2.061e-9).abs() < 1e-11);
        assert!((loss(&[1.0], &[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(loss(&[0.5], &[0.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let l: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
            let naive: f64 = l
                .iter()
                .zip(&y)
                .map(|(&l, &y)| {
                    let p = (1.0 / (1.0 + (-l).exp())).clamp(1e-15, 1.0 - 1e-15);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n as f64;
            assert!((loss(&y, &l).unwrap() - naive).abs() < 1e-9);
            assert!((bce_value(&y, &l) - naive).abs() < 1e-9);
        }
    }
}
