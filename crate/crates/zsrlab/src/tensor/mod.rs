//! Minimal reverse-mode autodiff substrate for the rest of the lab.

mod fd;
mod sgd;
mod tape;

pub use fd::{finite_diff_gradient, finite_diff_gradient_at, rel_err};
pub use sgd::sgd_momentum_step;
pub use tape::{Id, Scalar, Tape, LAYER_NORM_EPS, L2_NORM_FLOOR};
