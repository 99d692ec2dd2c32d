//! Finite-difference checks of analytic gradients, plus a catalog covering
//! every differentiable op.

use std::sync::Arc;

use crate::graph::{backward, Graph};
use crate::ops::conv::{avg_pool2d_grad, conv2d_input_grad, conv2d_weight_grad, Conv2dConfig, PoolConfig};
use crate::ops::shape::concat;
use crate::{Result, Tensor};

/// Value range an op input is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Uniform in [-1, 1).
    Any,
    /// Uniform in [0.2, 2).
    Positive,
    /// Magnitude in [0.1, 1) with random sign, keeping clear of kinks at 0.
    AwayFromZero,
    /// Shuffled values at least 0.08 apart, so no max/min flips under a
    /// small perturbation.
    Distinct,
}

/// One op under test: input shapes with their domains and the function
/// applying the op.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub apply: fn(&[Tensor]) -> Result<Tensor>,
}

impl OpCase {
    /// Draws inputs using `uniform`, a source of samples in [0, 1).
    pub fn sample(&self, uniform: &mut dyn FnMut() -> f64) -> Result<Vec<Tensor>> {
        self.inputs
            .iter()
            .map(|(shape, domain)| {
                let n = shape.iter().product();
                let data = match domain {
                    Domain::Any => (0..n).map(|_| 2.0 * uniform() - 1.0).collect(),
                    Domain::Positive => (0..n).map(|_| 0.2 + 1.8 * uniform()).collect(),
                    Domain::AwayFromZero => (0..n)
                        .map(|_| {
                            let m = 0.1 + 0.9 * uniform();
                            if uniform() < 0.5 {
                                -m
                            } else {
                                m
                            }
                        })
                        .collect(),
                    Domain::Distinct => {
                        let mut keyed: Vec<(f64, usize)> = (0..n).map(|i| (uniform(), i)).collect();
                        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
                        let mut data = vec![0.0; n];
                        for (rank, &(_, i)) in keyed.iter().enumerate() {
                            data[i] = (rank as f64 - n as f64 / 2.0) * 0.1 + 0.02 * uniform();
                        }
                        data
                    }
                };
                Tensor::new(shape, data)
            })
            .collect()
    }
}

/// Fixed, non-uniform cotangent used to reduce an op output to a scalar.
fn cotangent(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 0.5 * ((i + 1) as f64).sin()).collect()
}

/// Largest deviation between the analytic gradient of `Σ c ⊙ f(inputs)` and
/// central differences with step `h`, over all inputs. Each input's error
/// is relative to the largest finite-difference entry of that input.
pub fn gradient_error(f: fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], h: f64) -> Result<f64> {
    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| graph.leaf(t)).collect();
    let out = f(&leaves)?;
    let c = cotangent(out.numel());
    let loss = out.mul(&Tensor::new(out.shape(), c.clone())?)?.sum()?;
    let grads = backward(&loss, &leaves.iter().collect::<Vec<_>>(), false)?;
    let value = |xs: &[Tensor]| -> Result<f64> { Ok(f(xs)?.data().iter().zip(&c).map(|(a, b)| a * b).sum()) };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut fd = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let mut shifted = input.to_vec();
            shifted[i] = input.data()[i] + h;
            xs[k] = Tensor::new(input.shape(), shifted.clone())?;
            let up = value(&xs)?;
            shifted[i] = input.data()[i] - h;
            xs[k] = Tensor::new(input.shape(), shifted)?;
            let down = value(&xs)?;
            fd.push((up - down) / (2.0 * h));
        }
        let scale = fd.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        let err = grads[k]
            .data()
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (g, d)| m.max((g - d).abs()));
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], apply: fn(&[Tensor]) -> Result<Tensor>) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        apply,
    }
}

/// Every differentiable op, on small random-shaped inputs.
pub fn catalog() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case("add", &[(&[3, 4], Any), (&[3, 4], Any)], |x| x[0].add(&x[1])),
        case("add_broadcast", &[(&[3, 4], Any), (&[4], Any)], |x| x[0].add(&x[1])),
        case("sub_broadcast", &[(&[2, 3, 4], Any), (&[3, 1], Any)], |x| x[0].sub(&x[1])),
        case("mul_broadcast", &[(&[2, 3], Any), (&[2, 1], Any)], |x| x[0].mul(&x[1])),
        case("div", &[(&[3, 4], Any), (&[3, 4], Positive)], |x| x[0].div(&x[1])),
        case("neg", &[(&[5], Any)], |x| x[0].neg()),
        case("abs", &[(&[6], AwayFromZero)], |x| x[0].abs()),
        case("exp", &[(&[6], Any)], |x| x[0].exp()),
        case("ln", &[(&[6], Positive)], |x| x[0].ln()),
        case("powf", &[(&[6], Positive)], |x| x[0].powf(2.5)),
        case("scale", &[(&[6], Any)], |x| x[0].scale(-1.7)),
        case("add_scalar", &[(&[6], Any)], |x| x[0].add_scalar(0.3)),
        case("rsub_scalar", &[(&[6], Any)], |x| x[0].rsub_scalar(1.0)),
        case("matmul", &[(&[3, 4], Any), (&[4, 2], Any)], |x| x[0].matmul(&x[1])),
        case("transpose", &[(&[3, 4], Any)], |x| x[0].transpose()),
        case("relu", &[(&[8], AwayFromZero)], |x| x[0].relu()),
        case("tanh", &[(&[8], Any)], |x| x[0].tanh()),
        case("sigmoid", &[(&[8], Any)], |x| x[0].sigmoid()),
        case("softmax", &[(&[3, 5], Any)], |x| x[0].softmax()),
        case("log_softmax", &[(&[3, 5], Any)], |x| x[0].log_softmax()),
        case("sum_to", &[(&[3, 4], Any)], |x| x[0].sum_to(&[1, 4])),
        case("broadcast_to", &[(&[4], Any)], |x| x[0].broadcast_to(&[3, 4])),
        case("sum", &[(&[3, 4], Any)], |x| x[0].sum()),
        case("mean", &[(&[3, 4], Any)], |x| x[0].mean()),
        case("sum_last_dim", &[(&[3, 4], Any)], |x| x[0].sum_last_dim()),
        case("reshape", &[(&[3, 4], Any)], |x| x[0].reshape(&[2, 6])),
        case("flatten", &[(&[2, 3, 2], Any)], |x| x[0].flatten()),
        case("slice", &[(&[3, 4], Any)], |x| x[0].slice(1, 1, 3)),
        case("gather", &[(&[3, 4], Any)], |x| x[0].gather(Arc::from(vec![5, 0, 5, 11]), &[2, 2])),
        case("scatter", &[(&[4], Any)], |x| x[0].scatter(Arc::from(vec![2, 0, 2, 5]), &[2, 3])),
        case("select", &[(&[3, 4], Any)], |x| x[0].select(7)),
        case("max_all", &[(&[3, 4], Distinct)], |x| x[0].max_all()),
        case("min_all", &[(&[3, 4], Distinct)], |x| x[0].min_all()),
        case("concat", &[(&[2, 3], Any), (&[1, 3], Any)], |x| concat(&[&x[0], &x[1]], 0)),
        case("conv2d", &[(&[2, 2, 5, 5], Any), (&[3, 2, 3, 3], Any)], |x| {
            x[0].conv2d(&x[1], Conv2dConfig { stride: 1, padding: 1 })
        }),
        case("conv2d_strided", &[(&[1, 2, 6, 6], Any), (&[2, 2, 2, 2], Any)], |x| {
            x[0].conv2d(&x[1], Conv2dConfig { stride: 2, padding: 0 })
        }),
        case("max_pool2d", &[(&[1, 2, 4, 4], Distinct)], |x| x[0].max_pool2d(PoolConfig::square(2))),
        case("avg_pool2d", &[(&[1, 2, 4, 4], Any)], |x| x[0].avg_pool2d(PoolConfig::square(2))),
        case("conv2d_input_grad", &[(&[2, 3, 5, 5], Any), (&[3, 2, 3, 3], Any)], |x| {
            conv2d_input_grad(&x[0], &x[1], Conv2dConfig { stride: 1, padding: 1 }, (5, 5))
        }),
        case("conv2d_weight_grad", &[(&[2, 2, 5, 5], Any), (&[2, 3, 5, 5], Any)], |x| {
            conv2d_weight_grad(&x[0], &x[1], Conv2dConfig { stride: 1, padding: 1 }, (3, 3))
        }),
        case("avg_pool2d_grad", &[(&[1, 2, 2, 2], Any)], |x| {
            avg_pool2d_grad(&x[0], PoolConfig::square(2), (4, 4))
        }),
    ]
}
