use rand::Rng;

use super::init_bound;
use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x·Wᵀ + b` with `W` stored as `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = init_bound(in_features);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform([out_features, in_features], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        linear_forward(g.param(self.weight), g.param(self.bias), x)
    }
}

/// `x[B×I]·W[O×I]ᵀ + b[O]`
pub fn linear_forward<'g>(weight: Var<'g>, bias: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let (ws, xs) = (weight.shape(), x.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::dim(format!(
            "linear layer with weight {ws:?} cannot take input {xs:?}"
        )));
    }
    x.matmul_t(weight)?.add(bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn identity_weight_passes_input_through() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(Tensor::new([3, 2], vec![1.0, -2.0, 3.5, 0.0, 7.0, 8.0]).unwrap());
        assert_eq!(linear_forward(w, b, x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn zero_input_gives_bias() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::full([3, 2], 0.7));
        let b = tape.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let x = tape.constant(Tensor::zeros([2, 2]));
        assert_eq!(
            linear_forward(w, b, x).unwrap().to_vec(),
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn random_case_matches_loops() {
        let w_data = [0.3, -1.2, 0.5, 2.0, 0.1, -0.4];
        let x_data = [1.5, -0.5, 2.0, 0.25, 0.75, -1.0];
        let b_data = [0.2, -0.3];
        let tape = Tape::new();
        let w = tape.constant(Tensor::new([2, 3], w_data.to_vec()).unwrap());
        let b = tape.constant(Tensor::new([2], b_data.to_vec()).unwrap());
        let x = tape.constant(Tensor::new([2, 3], x_data.to_vec()).unwrap());
        let y = linear_forward(w, b, x).unwrap().to_vec();
        for r in 0..2 {
            for o in 0..2 {
                let mut acc = b_data[o];
                for i in 0..3 {
                    acc += x_data[r * 3 + i] * w_data[o * 3 + i];
                }
                assert!((y[r * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(Tensor::zeros([1, 4]));
        assert!(matches!(linear_forward(w, b, x), Err(Error::Dimension(_))));
    }
}
