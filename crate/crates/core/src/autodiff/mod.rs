//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as an append-only node list; node inputs
//! always refer to earlier nodes, so the recording order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Random noise enters as an explicit constant operand, never from inside an
//! op, so a forward pass is fully replayable.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
