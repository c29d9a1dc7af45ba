//! Tape-based reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records every operation executed in the forward pass together
//! with whatever it needs to run the chain rule in reverse. Parameters live in
//! a [`ParamStore`] outside the tape; each step binds them onto a fresh tape,
//! runs forward and backward, then writes gradients back into the store where
//! [`Sgd`] consumes them.

mod error;
mod kernels;
mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use ops::norm::{NormPhase, RunningStats};
pub use optim::{Adam, Sgd};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sign, Tensor};

/// Default negative slope for [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f32 = 0.01;
/// Default epsilon for [`Tape::batch_norm2d`].
pub const BN_EPS: f32 = 1e-5;
/// Default running-statistics momentum for [`Tape::batch_norm2d`].
pub const BN_MOMENTUM: f32 = 0.1;
