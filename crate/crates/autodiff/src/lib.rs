//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are computed by ops recorded on the same tape as the forward
//! pass, so `backward(.., create_graph = true)` returns tensors that can be
//! differentiated again. Individual non-linear op instances can have their
//! backward rule replaced via [`Graph::register_override`].
//!
//! ```
//! use aprop_autodiff::{backward, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::scalar(2.0));
//! let y = x.powf(3.0).unwrap();
//! let dy = backward(&y, &[&x], true).unwrap();
//! let d2y = backward(&dy[0], &[&x], false).unwrap();
//! assert_eq!(dy[0].item().unwrap(), 12.0);
//! assert_eq!(d2y[0].item().unwrap(), 12.0);
//! ```

mod backward;
mod error;
mod graph;
pub mod gradcheck;
pub mod ops;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{
    backward, backward_from, seed_backward, BackwardRule, Graph, NodeId, OverrideContext,
    OverrideId,
};
pub use ops::conv::{avg_pool2d_grad, conv2d_input_grad, conv2d_weight_grad, Conv2dConfig, PoolConfig};
pub use ops::nonlinear::NonlinearKind;
pub use ops::shape::concat;
pub use tensor::{is_checked, set_checked, Tensor};
