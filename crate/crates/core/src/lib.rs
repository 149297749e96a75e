//! Multimodal fusion of clinical time series and chest X-ray images.
//!
//! Modality-specific encoders produce latent vectors that a recurrent fusion
//! module consumes as a variable-length sequence: the time-series token first,
//! then the projected image token when an image exists. Everything runs on a
//! small reverse-mode autodiff engine in [`autograd`].

pub mod autograd;
mod bytes;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod layers;
pub mod model;
pub mod training;

pub use autograd::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
pub use config::{MissingVectorMode, ModelConfig, Task};
pub use error::{Error, Result};
pub use model::{Architecture, Model, ModelSpec};
