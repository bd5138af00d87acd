//! Wasserstein-routed capsule networks on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod routing;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
