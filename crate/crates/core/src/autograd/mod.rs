//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, randomize_params, GradCheckConfig, GradCheckReport};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{ElementwiseKind, Tape, Var};
pub(crate) use tape::bce_term;
pub use tensor::Tensor;
