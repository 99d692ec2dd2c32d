use crate::error::Result;
use crate::graph::{record, Op};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NonlinearKind {
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the last dimension.
    Softmax,
}

impl NonlinearKind {
    pub fn name(&self) -> &'static str {
        match self {
            NonlinearKind::Relu => "relu",
            NonlinearKind::Tanh => "tanh",
            NonlinearKind::Sigmoid => "sigmoid",
            NonlinearKind::Softmax => "softmax",
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if width == 0 {
        return out;
    }
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Tensor {
    /// Applies a non-linearity. Each call records a distinct op instance whose
    /// backward rule can be overridden through [`crate::Graph::register_override`].
    pub fn nonlinear(&self, kind: NonlinearKind) -> Result<Tensor> {
        let x = self.data();
        let data: Vec<f64> = match kind {
            NonlinearKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            NonlinearKind::Tanh => x.iter().map(|&v| v.tanh()).collect(),
            NonlinearKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            NonlinearKind::Softmax => softmax_rows(x, *self.shape.last().unwrap_or(&1)),
        };
        record(Op::Nonlinear(kind), &[self], self.shape.clone(), data)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.nonlinear(NonlinearKind::Relu)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.nonlinear(NonlinearKind::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.nonlinear(NonlinearKind::Sigmoid)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.nonlinear(NonlinearKind::Softmax)
    }

    /// Log-softmax over the last dimension, stabilised by a constant row-max shift.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let width = *self.shape.last().unwrap_or(&1);
        let maxes: Vec<f64> = self
            .data()
            .chunks(width.max(1))
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut max_shape = self.shape.clone();
        if let Some(last) = max_shape.last_mut() {
            *last = 1;
        }
        let shift = Tensor::new(&max_shape, maxes)?;
        let z = self.sub(&shift)?;
        let lse = z.exp()?.sum_last_dim()?.ln()?;
        z.sub(&lse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_rows_normalise() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = x.softmax().unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let ls = x.log_softmax().unwrap();
        for (a, b) in ls.data().iter().zip(y.data()) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }
}
