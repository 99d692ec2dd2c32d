use crate::error::{AutodiffError, Result};
use crate::graph::{record, Op};
use crate::ops::{broadcast_index_map, broadcast_or_err};
use crate::tensor::{is_checked, Tensor};

fn binary(a: &Tensor, b: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_or_err(op.name(), &a.shape, &b.shape)?;
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape == b.shape {
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    } else if y.len() == 1 && shape == a.shape {
        let q = y[0];
        x.iter().map(|&p| f(p, q)).collect()
    } else if x.len() == 1 && shape == b.shape {
        let p = x[0];
        y.iter().map(|&q| f(p, q)).collect()
    } else {
        let ma = broadcast_index_map(&a.shape, &shape);
        let mb = broadcast_index_map(&b.shape, &shape);
        ma.iter().zip(&mb).map(|(&i, &j)| f(x[i], y[j])).collect()
    };
    record(op, &[a, b], shape, data)
}

fn unary(a: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data: Vec<f64> = a.data().iter().map(|&v| f(v)).collect();
    record(op, &[a], a.shape.clone(), data)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Op::Add, |p, q| p + q)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Op::Mul, |p, q| p * q)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if is_checked() && other.data().iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::DivisionByZero);
        }
        binary(self, other, Op::Div, |p, q| p / q)
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary(self, Op::Neg, |v| -v)
    }

    pub fn abs(&self) -> Result<Tensor> {
        unary(self, Op::Abs, f64::abs)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, Op::Exp, f64::exp)
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Result<Tensor> {
        unary(self, Op::Log, f64::ln)
    }

    pub fn powf(&self, exponent: f64) -> Result<Tensor> {
        unary(self, Op::Powf(exponent), |v| v.powf(exponent))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        unary(self, Op::Scale(factor), |v| v * factor)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary(self, Op::AddScalar, |v| v + c)
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor> {
        self.neg()?.add_scalar(c)
    }
}

/// Elementwise sign as a constant tensor (sign(0) = 0).
pub(crate) fn sign_of(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_parts(t.shape.clone(), data.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_mul_and_mismatch() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![10.0, 100.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[10.0, 20.0, 300.0, 400.0]);
        let c = Tensor::new(&[3], vec![1.0; 3]).unwrap();
        assert!(matches!(a.add(&c), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn checked_mode_rejects_division_by_zero() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let z = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert!(a.div(&z).unwrap().data()[1].is_infinite());
        let prev = crate::set_checked(true);
        assert_eq!(a.div(&z).unwrap_err(), AutodiffError::DivisionByZero);
        let neg = Tensor::new(&[1], vec![-1.0]).unwrap();
        assert!(matches!(neg.ln(), Err(AutodiffError::NonFinite { .. })));
        crate::set_checked(prev);
    }
}
