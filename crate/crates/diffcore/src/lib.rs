//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated and replays
//! them backward to produce a [`GradientStore`]. Two features exist for
//! training through simulated rollouts:
//!
//! - [`Tape::stop_gradient`] returns a value that is identical in the forward
//!   pass but is a constant to the backward pass.
//! - [`Tape::mark_step_boundary`] scales gradients crossing a simulation step by
//!   `exp(-alpha * dt)`, giving a per-step decay of long-horizon gradients.

mod error;
pub mod gradcheck;
pub mod linalg;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use linalg::{exp_so3, ConvGeom};
pub use tape::{sigmoid, GradientStore, NodeId, Tape, ACOS_CLIP_EPS};
pub use tensor::Tensor;
