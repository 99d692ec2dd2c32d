//! Append-only computation tape and the reverse sweep over it.
//!
//! Every vector-Jacobian product is itself expressed with tensor ops, so a
//! backward pass run with `create_graph` appends new nodes to the same tape
//! and its results can be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::backward::vjp;
use crate::error::{AutodiffError, Result};
use crate::ops::nonlinear::NonlinearKind;
use crate::ops::conv::{Conv2dConfig, PoolConfig};
use crate::tensor::{is_checked, NodeRef, Tensor};

pub type NodeId = usize;
pub type OverrideId = usize;

/// Values handed to a backward-rule override.
///
/// `input` is the saved input feature of the overridden non-linear op and
/// `params` are the tensors registered together with the rule. When the
/// backward pass builds a graph, `grad_out`, `input` and `params` are attached
/// to it, so whatever the rule computes is differentiable in turn.
pub struct OverrideContext<'a> {
    pub grad_out: &'a Tensor,
    pub input: &'a Tensor,
    pub reference: Option<&'a Tensor>,
    pub params: &'a [Tensor],
}

/// Replacement for the analytic derivative of a non-linear op instance.
///
/// Returns the gradient with respect to the op's input. Rules must not hold
/// graph-attached tensors themselves (pass them as `params` instead), since
/// the graph owns its rules.
pub trait BackwardRule {
    fn backward(&self, ctx: &OverrideContext<'_>) -> Result<Tensor>;
}

impl<F> BackwardRule for F
where
    F: Fn(&OverrideContext<'_>) -> Result<Tensor>,
{
    fn backward(&self, ctx: &OverrideContext<'_>) -> Result<Tensor> {
        self(ctx)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Exp,
    Log,
    Powf(f64),
    Scale(f64),
    AddScalar,
    SumTo,
    BroadcastTo,
    Reshape,
    Transpose,
    MatMul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Gather { indices: Arc<[usize]> },
    Scatter { indices: Arc<[usize]> },
    Nonlinear(NonlinearKind),
    Conv2d(Conv2dConfig),
    Conv2dInputGrad(Conv2dConfig),
    Conv2dWeightGrad(Conv2dConfig),
    AvgPool(PoolConfig),
    AvgPoolGrad(PoolConfig),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Powf(_) => "powf",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::MatMul => "matmul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Nonlinear(k) => k.name(),
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad(_) => "conv2d_input_grad",
            Op::Conv2dWeightGrad(_) => "conv2d_weight_grad",
            Op::AvgPool(_) => "avg_pool2d",
            Op::AvgPoolGrad(_) => "avg_pool2d_grad",
        }
    }
}

#[derive(Clone)]
pub(crate) enum Input {
    Node(NodeId),
    Const(Tensor),
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    shape: Vec<usize>,
    value: Arc<[f64]>,
    override_id: Option<OverrideId>,
}

struct Override {
    rule: Rc<dyn BackwardRule>,
    reference: Option<Tensor>,
    params: Vec<NodeId>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    overrides: Vec<Override>,
}

/// Handle to a computation tape. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Creates a gradient-tracking leaf holding a copy of `value`'s data.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape.clone(),
            value: value.data.clone(),
            override_id: None,
        });
        self.attached(id, value.shape.clone(), value.data.clone())
    }

    fn push(&self, node: Node) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn attached(&self, id: NodeId, shape: Vec<usize>, data: Arc<[f64]>) -> Tensor {
        Tensor {
            shape,
            data,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    /// Replaces the analytic backward rule of the non-linear op that produced
    /// `output`. `reference` is stored by value; `params` must be tensors of
    /// this graph and are handed back to the rule on every call.
    pub fn register_override(
        &self,
        output: &Tensor,
        rule: Rc<dyn BackwardRule>,
        reference: Option<&Tensor>,
        params: &[Tensor],
    ) -> Result<OverrideId> {
        let node_ref = output.node.as_ref().ok_or(AutodiffError::NotInGraph)?;
        if !node_ref.graph.same_as(self) {
            return Err(AutodiffError::GraphMismatch);
        }
        let mut param_ids = Vec::with_capacity(params.len());
        for p in params {
            let r = p.node.as_ref().ok_or(AutodiffError::NotInGraph)?;
            if !r.graph.same_as(self) {
                return Err(AutodiffError::GraphMismatch);
            }
            param_ids.push(r.id);
        }
        let mut inner = self.inner.borrow_mut();
        if !matches!(inner.nodes[node_ref.id].op, Op::Nonlinear(_)) {
            return Err(AutodiffError::NotNonlinear);
        }
        let id = inner.overrides.len();
        inner.overrides.push(Override {
            rule,
            reference: reference.map(Tensor::detach),
            params: param_ids,
        });
        inner.nodes[node_ref.id].override_id = Some(id);
        Ok(id)
    }

    fn tensor_for(&self, id: NodeId, attach: bool) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        let (shape, data) = (node.shape.clone(), node.value.clone());
        drop(inner);
        if attach {
            self.attached(id, shape, data)
        } else {
            Tensor::from_parts(shape, data)
        }
    }

    fn input_tensor(&self, input: &Input, attach: bool) -> Tensor {
        match input {
            Input::Node(id) => self.tensor_for(*id, attach),
            Input::Const(t) => t.clone(),
        }
    }
}

/// Records an op over `inputs`. The result is attached to the inputs' graph
/// when any input is attached, and detached otherwise.
pub(crate) fn record(
    op: Op,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: impl Into<Arc<[f64]>>,
) -> Result<Tensor> {
    let data: Arc<[f64]> = data.into();
    if is_checked() && data.iter().any(|v| !v.is_finite()) {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    let mut graph: Option<&Graph> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match graph {
                None => graph = Some(&n.graph),
                Some(g) if !g.same_as(&n.graph) => return Err(AutodiffError::GraphMismatch),
                _ => {}
            }
        }
    }
    let Some(graph) = graph else {
        return Ok(Tensor::from_parts(shape, data));
    };
    let node_inputs = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) => Input::Node(n.id),
            None => Input::Const((*t).clone()),
        })
        .collect();
    let id = graph.push(Node {
        op,
        inputs: node_inputs,
        shape: shape.clone(),
        value: data.clone(),
        override_id: None,
    });
    Ok(graph.attached(id, shape, data))
}

/// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are attached to the graph and
/// can be differentiated again. The graph is retained either way; a tensor in
/// `wrt` that does not influence `loss` gets a zero gradient.
pub fn backward(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(AutodiffError::NonScalarLoss(loss.shape.clone()));
    }
    backward_from(loss, Tensor::full(&loss.shape, 1.0), wrt, create_graph)
}

/// Backward pass seeded with a one-hot gradient at `target` of the vector
/// `activation`.
pub fn seed_backward(
    activation: &Tensor,
    target: usize,
    wrt: &[&Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    if activation.rank() != 1 {
        return Err(AutodiffError::InvalidArgument {
            op: "seed_backward",
            msg: format!("activation must be a vector, got shape {:?}", activation.shape),
        });
    }
    let seed = Tensor::one_hot(activation.numel(), target)?;
    backward_from(activation, seed, wrt, create_graph)
}

/// Reverse sweep from `output` with an explicit output gradient.
pub fn backward_from(
    output: &Tensor,
    seed: Tensor,
    wrt: &[&Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    if seed.shape != output.shape {
        return Err(AutodiffError::ShapeMismatch {
            op: "backward",
            lhs: output.shape.clone(),
            rhs: seed.shape.clone(),
        });
    }
    let out_ref = output.node.as_ref().ok_or(AutodiffError::NotInGraph)?;
    let graph = out_ref.graph.clone();
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        let r = w.node.as_ref().ok_or(AutodiffError::NotInGraph)?;
        if !r.graph.same_as(&graph) {
            return Err(AutodiffError::GraphMismatch);
        }
        wrt_ids.push(r.id);
    }

    let root = out_ref.id;
    let n = root + 1;
    let needed = needed_nodes(&graph, root, &wrt_ids);

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    let mut results: Vec<Option<Tensor>> = vec![None; wrt_ids.len()];
    grads[root] = Some(seed);

    for id in (0..n).rev() {
        if !needed[id] {
            continue;
        }
        let Some(grad) = grads[id].take() else {
            continue;
        };
        for (slot, &w) in results.iter_mut().zip(&wrt_ids) {
            if w == id {
                *slot = Some(grad.clone());
            }
        }
        let (op, inputs, override_id) = {
            let inner = graph.inner.borrow();
            let node = &inner.nodes[id];
            (node.op.clone(), node.inputs.clone(), node.override_id)
        };
        if inputs.is_empty() {
            continue;
        }
        let needs: Vec<bool> = inputs
            .iter()
            .map(|i| matches!(i, Input::Node(j) if needed[*j]))
            .collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let input_tensors: Vec<Tensor> = inputs
            .iter()
            .map(|i| graph.input_tensor(i, create_graph))
            .collect();

        let input_grads = match override_id {
            Some(oid) => {
                let (rule, reference, params) = {
                    let inner = graph.inner.borrow();
                    let o = &inner.overrides[oid];
                    (o.rule.clone(), o.reference.clone(), o.params.clone())
                };
                let params: Vec<Tensor> =
                    params.iter().map(|&p| graph.tensor_for(p, create_graph)).collect();
                let ctx = OverrideContext {
                    grad_out: &grad,
                    input: &input_tensors[0],
                    reference: reference.as_ref(),
                    params: &params,
                };
                let g = rule.backward(&ctx)?;
                if g.shape != input_tensors[0].shape {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "backward override",
                        lhs: input_tensors[0].shape.clone(),
                        rhs: g.shape.clone(),
                    });
                }
                vec![Some(g)]
            }
            None => {
                let output = graph.tensor_for(id, create_graph);
                vjp(&op, &grad, &input_tensors, &output, &needs)?
            }
        };

        for ((input, g), need) in inputs.iter().zip(input_grads).zip(&needs) {
            let (Input::Node(j), Some(g), true) = (input, g, *need) else {
                continue;
            };
            let g = if create_graph { g } else { g.detach() };
            grads[*j] = Some(match grads[*j].take() {
                None => g,
                Some(acc) => acc.add(&g)?,
            });
        }
    }

    Ok(results
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| g.unwrap_or_else(|| Tensor::zeros(&w.shape)))
        .collect())
}

/// Nodes that lie on some path from a `wrt` node to `root`.
fn needed_nodes(graph: &Graph, root: NodeId, wrt_ids: &[NodeId]) -> Vec<bool> {
    let inner = graph.inner.borrow();
    let n = root + 1;
    let mut from_wrt = vec![false; n];
    for &w in wrt_ids {
        if w < n {
            from_wrt[w] = true;
        }
    }
    let min = wrt_ids.iter().copied().min().unwrap_or(n);
    for id in min..n {
        if from_wrt[id] {
            continue;
        }
        from_wrt[id] = inner.nodes[id]
            .inputs
            .iter()
            .any(|i| matches!(i, Input::Node(j) if from_wrt[*j]));
    }
    let mut needed = vec![false; n];
    let mut to_root = vec![false; n];
    to_root[root] = true;
    for id in (0..n).rev() {
        if !to_root[id] || !from_wrt[id] {
            continue;
        }
        needed[id] = true;
        for i in &inner.nodes[id].inputs {
            if let Input::Node(j) = i {
                to_root[*j] = true;
            }
        }
    }
    needed
}
