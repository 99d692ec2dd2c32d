//! Learnable backward propagation rules for attribution maps, together with
//! the classifiers they explain, baseline attribution methods and the
//! perturbation-based evaluation protocols.

mod error;

pub mod attribution;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod learned;
pub mod model;
pub mod optim;
pub mod train;

pub use aprop_autodiff::Tensor;
pub use error::{Error, Result};
