//! Reverse-mode differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] is built first (declaring parameter slots, constants and
//! operations), then evaluated with [`Tape::forward`] against concrete
//! parameter arrays, then differentiated with [`Tape::backward`].

mod adam;
pub(crate) mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{Matrix, SumAxis, Tape, Var};
