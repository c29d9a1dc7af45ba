//! Passport-layer ownership protection for small convolutional networks,
//! the substitution attacks that forge it, a weight-regularizer watermark
//! baseline, and the experiment harness around them.

pub mod archive;
pub mod attack;
pub mod data;
mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod passport;
pub mod rng;
pub mod train;
pub mod watermark;

pub use error::{Error, Result};
