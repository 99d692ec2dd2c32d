//! Vector-Jacobian products, written entirely in terms of differentiable ops.

use crate::error::Result;
use crate::graph::Op;
use crate::ops::conv::{avg_pool2d_grad, conv2d_input_grad, conv2d_weight_grad};
use crate::ops::elementwise::sign_of;
use crate::ops::nonlinear::NonlinearKind;
use crate::ops::shape::concat;
use crate::tensor::Tensor;

fn hw(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[2], s[3])
}

fn when(need: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

pub(crate) fn vjp(
    op: &Op,
    g: &Tensor,
    inputs: &[Tensor],
    output: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let x = &inputs[0];
    let single = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => {
            let y = &inputs[1];
            Ok(vec![
                when(need(0), || g.sum_to(x.shape()))?,
                when(need(1), || g.sum_to(y.shape()))?,
            ])
        }
        Op::Sub => {
            let y = &inputs[1];
            Ok(vec![
                when(need(0), || g.sum_to(x.shape()))?,
                when(need(1), || g.neg()?.sum_to(y.shape()))?,
            ])
        }
        Op::Mul => {
            let y = &inputs[1];
            Ok(vec![
                when(need(0), || g.mul(y)?.sum_to(x.shape()))?,
                when(need(1), || g.mul(x)?.sum_to(y.shape()))?,
            ])
        }
        Op::Div => {
            let y = &inputs[1];
            Ok(vec![
                when(need(0), || g.div(y)?.sum_to(x.shape()))?,
                when(need(1), || g.mul(x)?.div(&y.mul(y)?)?.neg()?.sum_to(y.shape()))?,
            ])
        }
        Op::Neg => single(g.neg()),
        Op::Abs => single(g.mul(&sign_of(x))),
        Op::Exp => single(g.mul(output)),
        Op::Log => single(g.div(x)),
        Op::Powf(p) => {
            if *p == 0.0 {
                single(Ok(Tensor::zeros(x.shape())))
            } else {
                single(g.mul(&x.powf(p - 1.0)?.scale(*p)?))
            }
        }
        Op::Scale(c) => single(g.scale(*c)),
        Op::AddScalar => single(Ok(g.clone())),
        Op::SumTo => single(g.broadcast_to(x.shape())),
        Op::BroadcastTo => single(g.sum_to(x.shape())),
        Op::Reshape => single(g.reshape(x.shape())),
        Op::Transpose => single(g.transpose()),
        Op::MatMul => {
            let y = &inputs[1];
            Ok(vec![
                when(need(0), || g.matmul(&y.transpose()?))?,
                when(need(1), || x.transpose()?.matmul(g))?,
            ])
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                out.push(when(need(i), || g.slice(*axis, offset, offset + len))?);
                offset += len;
            }
            Ok(out)
        }
        Op::Slice { axis, start, end } => {
            let dim = x.shape()[*axis];
            let mut parts = Vec::with_capacity(3);
            let pad = |len: usize| {
                let mut s = x.shape().to_vec();
                s[*axis] = len;
                Tensor::zeros(&s)
            };
            let before = pad(*start);
            let after = pad(dim - end);
            if *start > 0 {
                parts.push(&before);
            }
            parts.push(g);
            if *end < dim {
                parts.push(&after);
            }
            single(concat(&parts, *axis))
        }
        Op::Gather { indices } => single(g.scatter(indices.clone(), x.shape())),
        Op::Scatter { indices } => single(g.gather(indices.clone(), x.shape())),
        Op::Nonlinear(kind) => single(match kind {
            NonlinearKind::Relu => {
                let step: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                g.mul(&Tensor::new(x.shape(), step)?)
            }
            NonlinearKind::Tanh => g.mul(&output.mul(output)?.rsub_scalar(1.0)?),
            NonlinearKind::Sigmoid => g.mul(&output.mul(&output.rsub_scalar(1.0)?)?),
            NonlinearKind::Softmax => output.mul(&g.sub(&g.mul(output)?.sum_last_dim()?)?),
        }),
        Op::Conv2d(cfg) => {
            let w = &inputs[1];
            Ok(vec![
                when(need(0), || conv2d_input_grad(g, w, *cfg, hw(x)))?,
                when(need(1), || conv2d_weight_grad(x, g, *cfg, hw(w)))?,
            ])
        }
        Op::Conv2dInputGrad(cfg) => {
            // inputs: (grad_out, weight)
            let w = &inputs[1];
            Ok(vec![
                when(need(0), || g.conv2d(w, *cfg))?,
                when(need(1), || conv2d_weight_grad(g, x, *cfg, hw(w)))?,
            ])
        }
        Op::Conv2dWeightGrad(cfg) => {
            // inputs: (input, grad_out)
            let gy = &inputs[1];
            Ok(vec![
                when(need(0), || conv2d_input_grad(gy, g, *cfg, hw(x)))?,
                when(need(1), || x.conv2d(g, *cfg))?,
            ])
        }
        Op::AvgPool(cfg) => single(avg_pool2d_grad(g, *cfg, hw(x))),
        Op::AvgPoolGrad(cfg) => single(g.avg_pool2d(*cfg)),
    }
}
