//! Reductions, reshaping and indexing.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::graph::{record, Op};
use crate::ops::{broadcast_index_map, broadcast_shape};
use crate::tensor::{numel, Tensor};

impl Tensor {
    /// Sums over broadcast dimensions so the result has `shape`. `shape`
    /// must broadcast to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if broadcast_shape(shape, &self.shape).as_deref() != Some(self.shape.as_slice()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; numel(shape)];
        let x = self.data();
        if out.len() == 1 {
            out[0] = x.iter().sum();
        } else {
            let map = broadcast_index_map(shape, &self.shape);
            for (&j, &v) in map.iter().zip(x) {
                out[j] += v;
            }
        }
        record(Op::SumTo, &[self], shape.to_vec(), out)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if broadcast_shape(&self.shape, shape).as_deref() != Some(shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let x = self.data();
        let data: Vec<f64> = if x.len() == 1 {
            vec![x[0]; numel(shape)]
        } else {
            broadcast_index_map(&self.shape, shape).iter().map(|&i| x[i]).collect()
        };
        record(Op::BroadcastTo, &[self], shape.to_vec(), data)
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&self) -> Result<Tensor> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        // dividing (not scaling by 1/n) keeps means of integers exact
        self.sum()?.div(&Tensor::scalar(n as f64))
    }

    /// Sum over the last dimension, keeping it with size 1.
    pub fn sum_last_dim(&self) -> Result<Tensor> {
        let mut shape = self.shape.clone();
        match shape.last_mut() {
            Some(d) => *d = 1,
            None => return Ok(self.clone()),
        }
        self.sum_to(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        record(Op::Reshape, &[self], shape.to_vec(), self.data.clone())
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&self) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&1);
        let rest = if n == 0 { 0 } else { self.numel() / n };
        self.reshape(&[n, rest])
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let x = self.data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        record(Op::Slice { axis, start, end }, &[self], shape, data)
    }

    /// Picks elements by flat index into a tensor of `shape`.
    pub fn gather(&self, indices: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if indices.len() != numel(shape) {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: indices.len(),
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices.iter() {
            if i >= x.len() {
                return Err(AutodiffError::IndexOutOfRange {
                    index: i,
                    len: x.len(),
                });
            }
            data.push(x[i]);
        }
        record(Op::Gather { indices }, &[self], shape.to_vec(), data)
    }

    /// Adjoint of [`Tensor::gather`]: adds element `k` into flat position
    /// `indices[k]` of a zero tensor of `shape`.
    pub fn scatter(&self, indices: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if indices.len() != self.numel() {
            return Err(AutodiffError::DataLength {
                shape: self.shape.clone(),
                len: indices.len(),
            });
        }
        let mut out = vec![0.0; numel(shape)];
        for (&i, &v) in indices.iter().zip(self.data()) {
            if i >= out.len() {
                return Err(AutodiffError::IndexOutOfRange {
                    index: i,
                    len: out.len(),
                });
            }
            out[i] += v;
        }
        record(Op::Scatter { indices }, &[self], shape.to_vec(), out)
    }

    /// Element at flat `index`, as a scalar.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        self.gather(Arc::from(vec![index]), &[])
    }

    /// Largest element; ties resolve to the lowest flat index.
    pub fn max_all(&self) -> Result<Tensor> {
        self.select(self.arg_extreme(|a, b| a > b)?)
    }

    /// Smallest element; ties resolve to the lowest flat index.
    pub fn min_all(&self) -> Result<Tensor> {
        self.select(self.arg_extreme(|a, b| a < b)?)
    }

    fn arg_extreme(&self, better: impl Fn(f64, f64) -> bool) -> Result<usize> {
        let x = self.data();
        if x.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "max/min",
                msg: "empty tensor".into(),
            });
        }
        let mut best = 0;
        for (i, &v) in x.iter().enumerate().skip(1) {
            if better(v, x[best]) {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| AutodiffError::InvalidArgument {
        op: "concat",
        msg: "no tensors".into(),
    })?;
    if axis >= first.rank() {
        return Err(AutodiffError::InvalidArgument {
            op: "concat",
            msg: format!("axis {axis} out of range for rank {}", first.rank()),
        });
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for t in tensors {
        let compatible = t.rank() == first.rank()
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        shape[axis] += t.shape[axis];
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in tensors {
            let block = t.shape[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    record(Op::Concat { axis }, tensors, shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_to_reduces_broadcast_axes() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.sum_to(&[3]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.sum_to(&[2, 1]).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(t.sum().unwrap().item().unwrap(), 21.0);
        assert!(t.sum_to(&[2]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = t.slice(1, 0, 1).unwrap();
        let b = t.slice(1, 1, 3).unwrap();
        assert_eq!(a.data(), &[1.0, 4.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), t.data());
        assert_eq!(c.shape(), t.shape());
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let t = Tensor::new(&[4], vec![1.0, 3.0, 3.0, -2.0]).unwrap();
        assert_eq!(t.arg_extreme(|a, b| a > b).unwrap(), 1);
        assert_eq!(t.max_all().unwrap().item().unwrap(), 3.0);
        assert_eq!(t.min_all().unwrap().item().unwrap(), -2.0);
    }
}
