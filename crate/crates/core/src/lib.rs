//! Semi-online knowledge distillation at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! sequential networks with split points ([`nn`]), the distillation
//! objectives and knowledge-bridge construction ([`distill`]), imitation
//! metrics ([`metrics`]), dataset loaders ([`data`]) and the training
//! protocols ([`trainer`]).

pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
