use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(false) };
}

/// Enables or disables checked mode for the current thread and returns the
/// previous setting. In checked mode every op rejects non-finite results and
/// division by zero.
pub fn set_checked(enabled: bool) -> bool {
    CHECKED.with(|c| c.replace(enabled))
}

pub fn is_checked() -> bool {
    CHECKED.with(|c| c.get())
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) graph: Graph,
    pub(crate) id: NodeId,
}

/// Dense row-major `f64` tensor, optionally attached to a computation graph.
///
/// Attached tensors are the only ones that ever receive gradients; detached
/// tensors behave as constants.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data.into()))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[f64]>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    /// Shares `data` without copying.
    pub fn from_shared(shape: &[usize], data: Arc<[f64]>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), Arc::from(vec![value]))
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)].into())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// One-hot vector of length `len` with a one at `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(AutodiffError::IndexOutOfRange { index, len });
        }
        let mut data = vec![0.0; len];
        data[index] = 1.0;
        Ok(Self::from_parts(vec![len], data.into()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<[f64]> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "item",
                msg: format!("expected one element, tensor has shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same values, no graph attachment.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("node", &self.node_id())
            .finish()
    }
}
