use rand::Rng;

use super::init_bound;
use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// One LSTM layer. Gate blocks inside `w_ih`, `w_hh` and `bias` are ordered
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Cell parameters bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellVars<'g> {
    pub w_ih: Var<'g>,
    pub w_hh: Var<'g>,
    pub bias: Var<'g>,
}

impl LstmCell {
    /// Uniform `±1/√fan_in` weights, zero bias except the forget block at 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let h4 = 4 * hidden_size;
        let w_ih = store.add(
            format!("{name}.w_ih"),
            Tensor::uniform([h4, input_size], init_bound(input_size), rng),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            Tensor::uniform([h4, hidden_size], init_bound(hidden_size), rng),
        );
        let mut b = Tensor::zeros([h4]);
        b.data_mut()[hidden_size..2 * hidden_size].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        LstmCell {
            w_ih,
            w_hh,
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<'_>) -> LstmCellVars<'g> {
        LstmCellVars {
            w_ih: g.param(self.w_ih),
            w_hh: g.param(self.w_hh),
            bias: g.param(self.bias),
        }
    }

    pub fn step<'g>(
        &self,
        g: &'g Graph<'_>,
        x: Var<'g>,
        h: Var<'g>,
        c: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        lstm_cell_step(&self.bind(g), x, h, c)
    }

    /// Zero initial state for a batch.
    pub fn zero_state<'g>(&self, g: &'g Graph<'_>, batch: usize) -> (Var<'g>, Var<'g>) {
        (
            g.constant(Tensor::zeros([batch, self.hidden_size])),
            g.constant(Tensor::zeros([batch, self.hidden_size])),
        )
    }
}

/// One step: `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step<'g>(
    p: &LstmCellVars<'g>,
    x: Var<'g>,
    h_prev: Var<'g>,
    c_prev: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (wi, wh) = (p.w_ih.shape(), p.w_hh.shape());
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != wi[1] {
        return Err(Error::dim(format!(
            "lstm step: input {xs:?} does not match input weights {wi:?}"
        )));
    }
    let hidden = wh[1];
    let state_shape = [xs[0], hidden];
    if h_prev.shape() != state_shape || c_prev.shape() != state_shape {
        return Err(Error::dim(format!(
            "lstm step: state shapes {:?}/{:?} should be {state_shape:?}",
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    let projected = x.matmul_t(p.w_ih)?;
    gates_to_state(p, projected, h_prev, c_prev, hidden)
}

/// Finishes a step given the already projected input `x·W_ihᵀ`.
fn gates_to_state<'g>(
    p: &LstmCellVars<'g>,
    projected: Var<'g>,
    h_prev: Var<'g>,
    c_prev: Var<'g>,
    hidden: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let z = projected.add(h_prev.matmul_t(p.w_hh)?)?.add(p.bias)?;
    let i = z.slice_cols(0, hidden)?.sigmoid();
    let f = z.slice_cols(hidden, 2 * hidden)?.sigmoid();
    let cand = z.slice_cols(2 * hidden, 3 * hidden)?.tanh();
    let o = z.slice_cols(3 * hidden, 4 * hidden)?.sigmoid();
    let c = f.mul(c_prev)?.add(i.mul(cand)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}

/// Stack of LSTM layers with inverted dropout between consecutive layers.
#[derive(Clone, Debug)]
pub struct StackedLstm {
    pub layers: Vec<LstmCell>,
    pub dropout: f64,
}

impl StackedLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_size } else { hidden_size };
                LstmCell::new(store, &format!("{name}.{l}"), inp, hidden_size, rng)
            })
            .collect();
        StackedLstm { layers, dropout }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_size)
    }

    /// Runs `x[B×T×D]` from zero state and returns the top layer's last hidden state.
    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!("stacked lstm expects B×T×D input, got {shape:?}")));
        }
        let (batch, steps, dim) = (shape[0], shape[1], shape[2]);
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::invalid("stacked lstm has no layers"))?;
        if dim != first.input_size {
            return Err(Error::dim(format!(
                "stacked lstm expects input dim {}, got {dim}",
                first.input_size
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("empty sequence"));
        }

        // First layer: project all time steps with one product.
        let p0 = first.bind(g);
        let h4 = 4 * first.hidden_size;
        let projected = x
            .reshape(&[batch * steps, dim])?
            .matmul_t(p0.w_ih)?
            .reshape(&[batch, steps, h4])?;
        let (mut h, mut c) = first.zero_state(g, batch);
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            (h, c) = gates_to_state(&p0, projected.time_step(t)?, h, c, first.hidden_size)?;
            outputs.push(h);
        }

        for layer in &self.layers[1..] {
            let p = layer.bind(g);
            let (mut h, mut c) = layer.zero_state(g, batch);
            let mut next = Vec::with_capacity(steps);
            for &inp in &outputs {
                let inp = g.dropout(inp, self.dropout)?;
                (h, c) = lstm_cell_step(&p, inp, h, c)?;
                next.push(h);
            }
            outputs = next;
        }
        Ok(*outputs.last().expect("steps >= 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar reference step, independent of the tape.
    fn scalar_step(
        w_ih: &[f64],
        w_hh: &[f64],
        b: &[f64],
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (d, hs) = (x.len(), h.len());
        let pre = |row: usize| {
            let mut z = b[row];
            for k in 0..d {
                z += w_ih[row * d + k] * x[k];
            }
            for k in 0..hs {
                z += w_hh[row * hs + k] * h[k];
            }
            z
        };
        let mut h_new = vec![0.0; hs];
        let mut c_new = vec![0.0; hs];
        for j in 0..hs {
            let i = sig(pre(j));
            let f = sig(pre(hs + j));
            let g = pre(2 * hs + j).tanh();
            let o = sig(pre(3 * hs + j));
            c_new[j] = f * c[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    fn cell_store(d: usize, h: usize, seed: u64) -> (ParamStore, LstmCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = LstmCell::new(&mut store, "cell", d, h, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = Tensor::uniform(store.get(id).shape().to_vec(), 0.8, &mut rng);
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        (store, cell)
    }

    #[test]
    fn init_sets_forget_bias() {
        let (store, cell) = {
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "c", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
            (store, cell)
        };
        assert_eq!(store.get(cell.bias).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let bound = 1.0 / 3f64.sqrt();
        assert!(store.get(cell.w_ih).data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_params_zero_state() {
        let (mut store, cell) = cell_store(2, 3, 0);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::new(&store, false, 0);
        let x = g.constant(Tensor::full([1, 2], 0.7));
        let (h0, c0) = cell.zero_state(&g, 1);
        let (h, c) = cell.step(&g, x, h0, c0).unwrap();
        assert_eq!(h.to_vec(), vec![0.0; 3]);
        assert_eq!(c.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn saturated_gates_pass_memory_through() {
        let (mut store, cell) = cell_store(2, 3, 1);
        let b = store.get_mut(cell.bias).data_mut();
        b[..3].fill(-20.0);
        b[3..6].fill(20.0);
        let g = Graph::new(&store, false, 0);
        let x = g.constant(Tensor::new([1, 2], vec![0.1, -0.2]).unwrap());
        let h0 = g.constant(Tensor::new([1, 3], vec![0.05, 0.0, -0.05]).unwrap());
        let c_prev = vec![0.5, -0.25, 0.9];
        let c0 = g.constant(Tensor::new([1, 3], c_prev.clone()).unwrap());
        let (_, c) = cell.step(&g, x, h0, c0).unwrap();
        for (a, e) in c.to_vec().iter().zip(&c_prev) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let (store, cell) = cell_store(2, 3, 7);
        let x = [0.3, -1.1];
        let h = [0.2, -0.4, 0.6];
        let c = [-0.5, 0.1, 0.8];
        let g = Graph::new(&store, false, 0);
        let (hv, cv) = cell
            .step(
                &g,
                g.constant(Tensor::new([1, 2], x.to_vec()).unwrap()),
                g.constant(Tensor::new([1, 3], h.to_vec()).unwrap()),
                g.constant(Tensor::new([1, 3], c.to_vec()).unwrap()),
            )
            .unwrap();
        let (he, ce) = scalar_step(
            store.get(cell.w_ih).data(),
            store.get(cell.w_hh).data(),
            store.get(cell.bias).data(),
            &x,
            &h,
            &c,
        );
        for (a, e) in hv.to_vec().iter().chain(&cv.to_vec()).zip(he.iter().chain(&ce)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn stack_store(seed: u64, dropout: f64) -> (ParamStore, StackedLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = StackedLstm::new(&mut store, "lstm", 3, 4, 2, dropout, &mut rng);
        (store, stack)
    }

    fn seq(b: usize, t: usize, d: usize) -> Tensor {
        let data = (0..b * t * d).map(|i| ((i * 37 % 17) as f64 / 8.0) - 1.0).collect();
        Tensor::new([b, t, d], data).unwrap()
    }

    #[test]
    fn single_step_stack_equals_one_cell_step() {
        let mut store = ParamStore::new();
        let stack = StackedLstm::new(&mut store, "l", 3, 4, 1, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let x = seq(2, 1, 3);
        let g = Graph::new(&store, false, 0);
        let out = stack.forward(&g, g.constant(x.clone())).unwrap();
        let (h0, c0) = stack.layers[0].zero_state(&g, 2);
        let x2 = g.constant(x.reshape([2, 3]).unwrap());
        let (h, _) = stack.layers[0].step(&g, x2, h0, c0).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn stack_matches_manual_unroll() {
        let (store, stack) = stack_store(11, 0.0);
        let x = seq(2, 3, 3);
        let g = Graph::new(&store, true, 0);
        let out = stack.forward(&g, g.constant(x.clone())).unwrap().to_vec();

        let mut inputs: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                let mut v = Vec::new();
                for b in 0..2 {
                    v.extend_from_slice(&x.data()[(b * 3 + t) * 3..(b * 3 + t + 1) * 3]);
                }
                v
            })
            .collect();
        for layer in &stack.layers {
            let hs = layer.hidden_size;
            let d = layer.input_size;
            let mut h = vec![vec![0.0; hs]; 2];
            let mut c = vec![vec![0.0; hs]; 2];
            let mut next = Vec::new();
            for inp in &inputs {
                let mut row = Vec::new();
                for b in 0..2 {
                    let (hn, cn) = scalar_step(
                        store.get(layer.w_ih).data(),
                        store.get(layer.w_hh).data(),
                        store.get(layer.bias).data(),
                        &inp[b * d..(b + 1) * d],
                        &h[b],
                        &c[b],
                    );
                    row.extend_from_slice(&hn);
                    h[b] = hn;
                    c[b] = cn;
                }
                next.push(row);
            }
            inputs = next;
        }
        for (a, e) in out.iter().zip(inputs.last().unwrap()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_dropout_training_matches_eval() {
        let (store, stack) = stack_store(5, 0.0);
        let x = seq(2, 4, 3);
        let a = {
            let g = Graph::new(&store, true, 9);
            stack.forward(&g, g.constant(x.clone())).unwrap().to_vec()
        };
        let b = {
            let g = Graph::new(&store, false, 9);
            stack.forward(&g, g.constant(x)).unwrap().to_vec()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let (store, stack) = stack_store(5, 0.0);
        let g = Graph::new(&store, false, 0);
        let err = stack.forward(&g, g.constant(seq(1, 2, 5))).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let (mut store, stack) = stack_store(13, 0.3);
        let x = seq(2, 3, 3);
        let cfg = GradCheckConfig {
            training: true,
            seed: 4,
            ..Default::default()
        };
        let report = check_gradients(&mut store, cfg, |g| {
            Ok(stack.forward(g, g.constant(x.clone()))?.sum())
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }
}
