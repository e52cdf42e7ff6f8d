//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The working precision is 32-bit floats throughout; test oracles are free
//! to accumulate in 64-bit. Every operation validates that its output is
//! finite — NaN or Inf anywhere is a contract violation reported as
//! [`crate::Error::Numerical`].
//!
//! Differentiation is tape-based: a [`Tape`] records each primitive applied
//! to tracked values, and [`Tape::backward`] replays the records in reverse
//! to accumulate gradients for every leaf that requires them. The loss is a
//! scalar and parameters are many, so reverse mode is the right shape.

mod gradcheck;
mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{GTensor, Tensor};
