//! Neural building blocks composed from autograd primitives.

mod conv;
mod linear;
mod lstm;

pub use conv::{global_avg_pool, Conv2d, ResidualBlock};
pub use linear::{linear_forward, Linear};
pub use lstm::{lstm_cell_step, LstmCell, LstmCellVars, StackedLstm};

/// Bound used by the `±1/√fan_in` uniform initialisation.
pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
