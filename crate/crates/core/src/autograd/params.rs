use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters.
///
/// A parameter is trainable iff its tensor has `requires_grad` set; freezing
/// clears that flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Panics on duplicate names, which
    /// would indicate a bug in model construction.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad()).collect()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.set_requires_grad(on);
                n += 1;
            }
        }
        n
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies values from `src` for every parameter whose name starts with
    /// `prefix`, returning how many were copied. Shapes must agree.
    pub fn copy_matching(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, tensor) in src.names.iter().zip(&src.tensors) {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some(id) = self.find(name) else { continue };
            let dst = &mut self.tensors[id.0];
            if dst.shape() != tensor.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: stored shape {:?} vs incoming {:?}",
                    dst.shape(),
                    tensor.shape()
                )));
            }
            dst.data_mut().copy_from_slice(tensor.data());
            copied += 1;
        }
        Ok(copied)
    }
}

/// Tape plus parameter bindings for a single forward/backward pass.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<usize>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    /// `seed` drives dropout masks; it is irrelevant when `training` is false.
    pub fn new(store: &'s ParamStore, training: bool, seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The parameter as a tape leaf, recorded once per graph.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        let mut bound = self.bound.borrow_mut();
        if let Some(var) = bound[id.0] {
            return self.tape.var(var);
        }
        let v = self.tape.leaf(self.store.get(id));
        bound[id.0] = Some(v.id());
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.tape.constant(t)
    }

    /// Inverted dropout; the identity when not training or when `rate == 0`.
    pub fn dropout<'g>(&'g self, x: Var<'g>, rate: f64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        let mask = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        x.mask_mul(mask)
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// trainable parameter.
    pub fn backward(&self, loss: Var<'_>) -> Result<Vec<(ParamId, Vec<f64>)>> {
        self.tape.backward(loss)?;
        let bound = self.bound.borrow();
        Ok(bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let var = self.tape.var((*v)?);
                var.grad().map(|g| (ParamId(i), g))
            })
            .collect())
    }
}

impl ParamStore {
    /// Adds gradients produced by [`Graph::backward`] into the stored tensors.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }
}
