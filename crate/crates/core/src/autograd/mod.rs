//! Reverse-mode differentiation over the kernels in this crate, with the
//! straight-through estimator standing in for the derivative of `Sign`.

mod adam;
mod backward;
pub mod gradcheck;
pub(crate) mod tape;

pub use adam::{Adam, AdamConfig, Parameterized};
pub use backward::Gradients;
pub use tape::{BnObservation, SignMode, Tape, TapeConfig, Var};
