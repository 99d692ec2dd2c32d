//! 2-D convolution and pooling over NCHW tensors.
//!
//! Convolution, its input-gradient (transposed convolution) and its
//! weight-gradient form a family closed under differentiation, which is what
//! lets second-order gradients flow through conv layers.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::graph::{record, Op};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolConfig {
    pub fn square(kernel: usize) -> Self {
        PoolConfig {
            kernel,
            stride: kernel,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        None
    } else {
        Some((input + 2 * pad - kernel) / stride + 1)
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape.as_slice() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("expected NCHW rank-4 tensor, got {:?}", t.shape),
        }),
    }
}

fn geometry(
    op: &'static str,
    x: [usize; 4],
    w: [usize; 4],
    cfg: Conv2dConfig,
) -> Result<Geometry> {
    let [n, c, h, wd] = x;
    let [o, wc, kh, kw] = w;
    if wc != c {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let (Some(oh), Some(ow)) = (
        out_dim(h, kh, cfg.stride, cfg.padding),
        out_dim(wd, kw, cfg.stride, cfg.padding),
    ) else {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("kernel {kh}x{kw} does not fit padded input {h}x{wd} (stride {}, padding {})", cfg.stride, cfg.padding),
        });
    };
    Ok(Geometry {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        oh,
        ow,
        stride: cfg.stride,
        pad: cfg.padding,
    })
}

fn im2col(g: &Geometry, x: &[f64], col: &mut [f64]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, col: &[f64], x: &mut [f64]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            x[base + xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = vec![0.0; g.n * g.o * ohw];
    let mut col = vec![0.0; ckk * ohw];
    let in_size = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(g, &x[n * in_size..(n + 1) * in_size], &mut col);
        let y = &mut out[n * g.o * ohw..(n + 1) * g.o * ohw];
        gemm(g.o, ckk, ohw, w, ckk as isize, 1, &col, ohw as isize, 1, 0.0, y);
    }
    out
}

fn conv_input_grad(g: &Geometry, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_size = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * in_size];
    let mut col = vec![0.0; ckk * ohw];
    for n in 0..g.n {
        let gyn = &gy[n * g.o * ohw..(n + 1) * g.o * ohw];
        gemm(ckk, g.o, ohw, w, 1, ckk as isize, gyn, ohw as isize, 1, 0.0, &mut col);
        col2im(g, &col, &mut out[n * in_size..(n + 1) * in_size]);
    }
    out
}

fn conv_weight_grad(g: &Geometry, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_size = g.c * g.h * g.w;
    let mut out = vec![0.0; g.o * ckk];
    let mut col = vec![0.0; ckk * ohw];
    for n in 0..g.n {
        im2col(g, &x[n * in_size..(n + 1) * in_size], &mut col);
        let gyn = &gy[n * g.o * ohw..(n + 1) * g.o * ohw];
        gemm(g.o, ohw, ckk, gyn, ohw as isize, 1, &col, 1, ohw as isize, 1.0, &mut out);
    }
    out
}

impl Tensor {
    /// Cross-correlation of `self` (N×C×H×W) with `weight` (O×C×kh×kw).
    pub fn conv2d(&self, weight: &Tensor, cfg: Conv2dConfig) -> Result<Tensor> {
        let g = geometry("conv2d", rank4("conv2d", self)?, rank4("conv2d", weight)?, cfg)?;
        let out = conv_forward(&g, self.data(), weight.data());
        record(Op::Conv2d(cfg), &[self, weight], vec![g.n, g.o, g.oh, g.ow], out)
    }

    /// 2-D max pooling. Each output reads the first maximal element of its
    /// window (lowest linear index on ties), and the gradient is routed there.
    pub fn max_pool2d(&self, cfg: PoolConfig) -> Result<Tensor> {
        let (shape, indices) = max_pool_indices(self, cfg)?;
        self.gather(Arc::from(indices), &shape)
    }

    pub fn avg_pool2d(&self, cfg: PoolConfig) -> Result<Tensor> {
        let [n, c, h, w] = rank4("avg_pool2d", self)?;
        let (oh, ow) = pool_out("avg_pool2d", h, w, cfg)?;
        let x = self.data();
        let k = cfg.kernel;
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += src[(oy * cfg.stride + i) * w + ox * cfg.stride + j];
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        record(Op::AvgPool(cfg), &[self], vec![n, c, oh, ow], out)
    }
}

fn pool_out(op: &'static str, h: usize, w: usize, cfg: PoolConfig) -> Result<(usize, usize)> {
    match (out_dim(h, cfg.kernel, cfg.stride, 0), out_dim(w, cfg.kernel, cfg.stride, 0)) {
        (Some(a), Some(b)) if cfg.kernel > 0 => Ok((a, b)),
        _ => Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("pool {cfg:?} does not fit input {h}x{w}"),
        }),
    }
}

fn max_pool_indices(x: &Tensor, cfg: PoolConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let [n, c, h, w] = rank4("max_pool2d", x)?;
    let (oh, ow) = pool_out("max_pool2d", h, w, cfg)?;
    let data = x.data();
    let mut indices = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * cfg.stride * w + ox * cfg.stride;
                for i in 0..cfg.kernel {
                    for j in 0..cfg.kernel {
                        let idx = base + (oy * cfg.stride + i) * w + ox * cfg.stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                indices.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], indices))
}

/// Gradient of `conv2d` with respect to its input: the transposed
/// convolution of `grad_out` with `weight`, producing N×C×`input_hw`.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    cfg: Conv2dConfig,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let [n, o, oh, ow] = rank4("conv2d_input_grad", grad_out)?;
    let [wo, c, kh, kw] = rank4("conv2d_input_grad", weight)?;
    let g = geometry(
        "conv2d_input_grad",
        [n, c, input_hw.0, input_hw.1],
        [wo, c, kh, kw],
        cfg,
    )?;
    if wo != o || g.oh != oh || g.ow != ow {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: grad_out.shape.clone(),
            rhs: weight.shape.clone(),
        });
    }
    let out = conv_input_grad(&g, grad_out.data(), weight.data());
    record(
        Op::Conv2dInputGrad(cfg),
        &[grad_out, weight],
        vec![n, c, g.h, g.w],
        out,
    )
}

/// Gradient of `conv2d` with respect to its weight, given the forward input
/// and `grad_out`; the result has shape O×C×`kernel_hw`.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    cfg: Conv2dConfig,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    let [n, c, h, w] = rank4("conv2d_weight_grad", input)?;
    let [gn, o, oh, ow] = rank4("conv2d_weight_grad", grad_out)?;
    let g = geometry(
        "conv2d_weight_grad",
        [n, c, h, w],
        [o, c, kernel_hw.0, kernel_hw.1],
        cfg,
    )?;
    if gn != n || g.oh != oh || g.ow != ow {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: input.shape.clone(),
            rhs: grad_out.shape.clone(),
        });
    }
    let out = conv_weight_grad(&g, input.data(), grad_out.data());
    record(
        Op::Conv2dWeightGrad(cfg),
        &[input, grad_out],
        vec![o, c, kernel_hw.0, kernel_hw.1],
        out,
    )
}

/// Adjoint of `avg_pool2d`: spreads each gradient over its window.
pub fn avg_pool2d_grad(grad_out: &Tensor, cfg: PoolConfig, input_hw: (usize, usize)) -> Result<Tensor> {
    let [n, c, oh, ow] = rank4("avg_pool2d_grad", grad_out)?;
    let (h, w) = input_hw;
    if pool_out("avg_pool2d_grad", h, w, cfg)? != (oh, ow) {
        return Err(AutodiffError::InvalidArgument {
            op: "avg_pool2d_grad",
            msg: format!("input {h}x{w} does not pool to {oh}x{ow}"),
        });
    }
    let g = grad_out.data();
    let k = cfg.kernel;
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(plane * oh + oy) * ow + ox] * norm;
                for i in 0..k {
                    for j in 0..k {
                        dst[(oy * cfg.stride + i) * w + ox * cfg.stride + j] += v;
                    }
                }
            }
        }
    }
    record(Op::AvgPoolGrad(cfg), &[grad_out], vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_input() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, Conv2dConfig::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.max_pool2d(PoolConfig::square(2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, idx) = max_pool_indices(&x, PoolConfig::square(2)).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn padding_and_stride_shapes() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = x
            .conv2d(&w, Conv2dConfig { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let wrong_channels = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            x.conv2d(&wrong_channels, Conv2dConfig::default()),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        let too_big = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            x.conv2d(&too_big, Conv2dConfig::default()),
            Err(AutodiffError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn avg_pool_and_adjoint() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(x.avg_pool2d(PoolConfig::square(2)).unwrap().data(), &[3.0]);
        let g = Tensor::new(&[1, 1, 1, 1], vec![4.0]).unwrap();
        let back = avg_pool2d_grad(&g, PoolConfig::square(2), (2, 2)).unwrap();
        assert_eq!(back.data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
