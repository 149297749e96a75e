//! Central finite-difference comparison for analytic gradients.

use super::params::{Graph, ParamStore};
use super::tape::Var;
use crate::error::Result;

/// Outcome of a finite-difference comparison over every trainable scalar.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel_error: f64,
    /// See [`Tape::relu_margin`](super::Tape::relu_margin).
    pub relu_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub training: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            rel_tol: 1e-5,
            abs_tol: 1e-7,
            training: false,
            seed: 0,
        }
    }
}

/// Compares the tape gradient of `loss` against central differences for every
/// trainable scalar in `store`. Each evaluation uses a fresh graph with the
/// same seed, so dropout masks are identical across perturbations.
pub fn check_gradients<F>(store: &mut ParamStore, cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: for<'g, 's> Fn(&'g Graph<'s>) -> Result<Var<'g>>,
{
    let (analytic, relu_margin) = {
        let g = Graph::new(store, cfg.training, cfg.seed);
        let l = loss(&g)?;
        let margin = g.tape().relu_margin();
        (g.backward(l)?, margin)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new(store, cfg.training, cfg.seed);
        Ok(loss(&g)?.to_vec()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        max_rel_error: 0.0,
        relu_margin,
    };
    for (id, grad) in analytic {
        for i in 0..grad.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let diff = (grad[i] - numeric).abs();
            let scale = grad[i].abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            report.checked += 1;
            if diff > cfg.abs_tol {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > cfg.rel_tol {
                    report.failures.push(format!(
                        "{}[{i}]: analytic {:.10e} vs numeric {:.10e}",
                        store.name(id),
                        grad[i],
                        numeric
                    ));
                }
            }
        }
    }
    Ok(report)
}

/// Redraws every parameter uniformly in `±bound`. Zero-initialised biases put
/// ReLU inputs exactly on the kink wherever a receptive field is all zero,
/// where finite differences are meaningless; random biases avoid that.
pub fn randomize_params(store: &mut ParamStore, bound: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
}
