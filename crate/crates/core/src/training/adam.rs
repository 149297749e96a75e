use crate::autograd::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        let i = id.index();
        (i < self.m.len() && !self.m[i].is_empty()).then(|| (self.m[i].as_slice(), self.v[i].as_slice()))
    }

    /// Applies one update. `grads` must cover every trainable parameter and
    /// nothing else.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        let mut covered = vec![false; store.len()];
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.requires_grad() {
                return Err(Error::FrozenParameter(store.name(*id).to_string()));
            }
            if g.len() != p.len() {
                return Err(Error::Contract(format!(
                    "gradient for `{}` has {} entries, parameter has {}",
                    store.name(*id),
                    g.len(),
                    p.len()
                )));
            }
            covered[id.index()] = true;
        }
        if let Some(id) = store.trainable().into_iter().find(|id| !covered[id.index()]) {
            return Err(Error::Contract(format!("no gradient for trainable `{}`", store.name(id))));
        }

        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(*id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}
