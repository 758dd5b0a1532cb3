//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Everything runs in f64 so analytic gradients can be held to tight
//! finite-difference tolerances. Tensors are laid out [B,C,H,W] for maps and
//! [B,D] for vectors; a fresh tape is built per forward/backward pass.

mod check;
mod conv;
mod ops;
mod tape;

pub use check::{fd_check_inputs, fd_check_scalar_inputs, rel_err, FD_EPS};
pub use conv::{conv2d_reference, ConvSpec};
pub use tape::{Gradients, Tape, Var};
