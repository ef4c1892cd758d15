//! Reverse-mode automatic differentiation over `f64` tensors and the Adam
//! optimizer.
//!
//! Every forward pass records onto a fresh [`Tape`]. Parameters are bound as
//! leaves, the loss is swept backward once, and the resulting [`Gradients`]
//! feed [`AdamState::step`]. Fused kernels (volume rendering, tri-plane
//! lookup) plug in through [`Tape::custom`] with hand-written adjoints.

mod adam;
mod check;
mod conv;
mod ops;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use check::{finite_diff_check, finite_diff_report, FiniteDiffReport};
pub use tape::{BackwardFn, GradSink, Gradients, Tape, Values, Var};

#[cfg(test)]
mod tests;
