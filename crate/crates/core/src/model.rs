//! CNN classifier definitions, initialization and the forward pass.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use aprop_autodiff::{Conv2dConfig, NonlinearKind, PoolConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Normalization;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Nonlinear(NonlinearKind),
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    /// Output shape (without batch) for an input of shape `input`.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Shape(format!("{self}: {msg}")));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return bad(format!("expects CHW input, got {input:?}"));
                };
                if c != in_channels {
                    return bad(format!("expects {in_channels} channels, got {c}"));
                }
                if stride == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("kernel does not fit {h}x{w}"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                let &[c, h, w] = input else {
                    return bad(format!("expects CHW input, got {input:?}"));
                };
                if stride == 0 || kernel == 0 || h < kernel || w < kernel {
                    return bad(format!("window does not fit {h}x{w}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return bad(format!("expects [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Nonlinear(_) => Ok(input.to_vec()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d({in_channels},{out_channels},{kernel},{stride},{padding})"),
            LayerSpec::MaxPool { kernel, stride } => write!(f, "maxpool({kernel},{stride})"),
            LayerSpec::AvgPool { kernel, stride } => write!(f, "avgpool({kernel},{stride})"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear({in_features},{out_features})"),
            LayerSpec::Nonlinear(k) => write!(f, "{}", k.name()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::format("layer", s.to_string()))?;
                let args: std::result::Result<Vec<usize>, _> =
                    inner.split(',').map(|a| a.trim().parse::<usize>()).collect();
                (n, args.map_err(|_| Error::format("layer", s.to_string()))?)
            }
            None => (s, Vec::new()),
        };
        let layer = match (name, args.as_slice()) {
            ("conv2d", &[i, o, k, st, p]) => LayerSpec::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: k,
                stride: st,
                padding: p,
            },
            ("maxpool", &[k, st]) => LayerSpec::MaxPool { kernel: k, stride: st },
            ("avgpool", &[k, st]) => LayerSpec::AvgPool { kernel: k, stride: st },
            ("flatten", []) => LayerSpec::Flatten,
            ("linear", &[i, o]) => LayerSpec::Linear {
                in_features: i,
                out_features: o,
            },
            ("relu", []) => LayerSpec::Nonlinear(NonlinearKind::Relu),
            ("tanh", []) => LayerSpec::Nonlinear(NonlinearKind::Tanh),
            ("sigmoid", []) => LayerSpec::Nonlinear(NonlinearKind::Sigmoid),
            ("softmax", []) => LayerSpec::Nonlinear(NonlinearKind::Softmax),
            _ => return Err(Error::format("layer", s.to_string())),
        };
        Ok(layer)
    }
}

/// Layer sequence of a classifier whose last layer emits pre-softmax logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// C, H, W
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelSpec {
    /// conv(1→16, 5×5) → relu → maxpool 2 → conv(16→32, 5×5) → relu →
    /// maxpool 2 → flatten → linear(→ classes), for square inputs of `side`.
    pub fn mnist_cnn2_for(side: usize, num_classes: usize) -> Self {
        let after = ((side.saturating_sub(4)) / 2).saturating_sub(4) / 2;
        let relu = LayerSpec::Nonlinear(NonlinearKind::Relu);
        ModelSpec {
            name: "mnist_cnn2".into(),
            layers: vec![
                LayerSpec::conv(1, 16, 5, 0),
                relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::conv(16, 32, 5, 0),
                relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 32 * after * after,
                    out_features: num_classes,
                },
            ],
            input_shape: [1, side, side],
            num_classes,
        }
    }

    pub fn mnist_cnn2() -> Self {
        Self::mnist_cnn2_for(28, 10)
    }

    /// Four 3×3 conv+relu blocks with a maxpool after the second and fourth.
    pub fn cifar_cnn4() -> Self {
        let relu = LayerSpec::Nonlinear(NonlinearKind::Relu);
        let pool = LayerSpec::MaxPool { kernel: 2, stride: 2 };
        ModelSpec {
            name: "cifar_cnn4".into(),
            layers: vec![
                LayerSpec::conv(3, 16, 3, 1),
                relu,
                LayerSpec::conv(16, 16, 3, 1),
                relu,
                pool,
                LayerSpec::conv(16, 32, 3, 1),
                relu,
                LayerSpec::conv(32, 32, 3, 1),
                relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 32 * 8 * 8,
                    out_features: 10,
                },
            ],
            input_shape: [3, 32, 32],
            num_classes: 10,
        }
    }

    /// Built-in architecture by name, sized for the given input and class count.
    pub fn named(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let spec = match name {
            "mnist_cnn2" => {
                let mut s = Self::mnist_cnn2_for(input_shape[1], num_classes);
                s.input_shape = input_shape;
                s
            }
            "cifar_cnn4" => Self::cifar_cnn4(),
            other => return Err(Error::InvalidArgument(format!("unknown model '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-layer output shapes (without batch dimension).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        match shapes.last() {
            Some(last) if *last == [self.num_classes] => Ok(()),
            other => Err(Error::Shape(format!(
                "final output {other:?} does not match {} classes",
                self.num_classes
            ))),
        }
    }

    /// Input shapes of the non-linear layers, in model order.
    pub fn nonlinear_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::Nonlinear(_)))
            .map(|(_, s)| s.clone())
            .collect())
    }
}

/// Immutable, shareable numeric array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Arc<[f64]>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Array {
            shape,
            data: data.into(),
        })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_shared(&self.shape, self.data.clone()).expect("array shape is consistent")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Array,
    pub bias: Array,
}

/// Weights and biases per layer (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Option<LayerParams>>,
    pub init_seed: u64,
}

impl Parameters {
    /// `(name, array)` for every weight and bias, in layer order.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("layer{i}.weight"), &p.weight));
                out.push((format!("layer{i}.bias"), &p.bias));
            }
        }
        out
    }

    pub fn flat(&self) -> Vec<Vec<f64>> {
        self.named_arrays().iter().map(|(_, a)| a.data.to_vec()).collect()
    }

    /// Rebuilds parameters of the same layout from flat vectors in
    /// [`Parameters::named_arrays`] order.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<Parameters> {
        let mut it = values.into_iter();
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            layers.push(match p {
                None => None,
                Some(p) => {
                    let mut next = |shape: &Vec<usize>| -> Result<Array> {
                        let v = it
                            .next()
                            .ok_or_else(|| Error::Shape("too few parameter tensors".into()))?;
                        Array::new(shape.clone(), v)
                    };
                    Some(LayerParams {
                        weight: next(&p.weight.shape)?,
                        bias: next(&p.bias.shape)?,
                    })
                }
            });
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many parameter tensors".into()));
        }
        Ok(Parameters {
            layers,
            init_seed: self.init_seed,
        })
    }
}

/// Kaiming-uniform weights (bound √(6 / fan_in)) and zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let (wshape, fan_in, out) = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (vec![out_features, in_features], in_features, out_features),
            _ => {
                layers.push(None);
                continue;
            }
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = wshape.iter().product();
        let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(Some(LayerParams {
            weight: Array::new(wshape, w)?,
            bias: Array::new(vec![out], vec![0.0; out])?,
        }));
    }
    Ok(Parameters {
        layers,
        init_seed: seed,
    })
}

/// Output of a batched forward pass together with every non-linear layer's
/// input and output.
pub(crate) struct Trace {
    pub output: Tensor,
    pub nl_inputs: Vec<Tensor>,
    pub nl_outputs: Vec<Tensor>,
}

/// Result of a single-image forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// Pre-softmax logits, shape `[num_classes]`.
    pub activation: Tensor,
    /// Input feature `f_in` of each non-linear layer (batch dimension of 1 kept).
    pub feature_maps: Vec<Tensor>,
    /// Output of each non-linear layer; these are the op instances that
    /// backward-rule overrides attach to.
    pub nonlinear_outputs: Vec<Tensor>,
    /// Features of the all-zero input, when requested.
    pub reference_features: Option<Vec<Tensor>>,
    /// `f - f_ref` per layer, when requested.
    pub feature_deltas: Option<Vec<Tensor>>,
}

/// A trained classifier: architecture, weights and input statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub norm: Normalization,
}

impl Model {
    pub fn new(spec: ModelSpec, params: Parameters, norm: Normalization) -> Result<Self> {
        spec.validate()?;
        if params.layers.len() != spec.layers.len() {
            return Err(Error::Shape("parameter layers do not match spec".into()));
        }
        Ok(Model { spec, params, norm })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Parameters as detached tensors.
    pub(crate) fn param_tensors(&self) -> Vec<Option<(Tensor, Tensor)>> {
        self.params
            .layers
            .iter()
            .map(|p| p.as_ref().map(|p| (p.weight.tensor(), p.bias.tensor())))
            .collect()
    }

    pub(crate) fn run(&self, x: &Tensor, params: &[Option<(Tensor, Tensor)>]) -> Result<Trace> {
        run_layers(&self.spec, x, params)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "image shape {:?}, model expects {:?}",
                image.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass of one normalized C×H×W image. `image` may be attached
    /// to a graph; the model parameters enter as constants.
    pub fn forward(&self, image: &Tensor, with_reference: bool) -> Result<ForwardRecord> {
        self.check_image(image)?;
        let params = self.param_tensors();
        let [c, h, w] = self.spec.input_shape;
        let trace = self.run(&image.reshape(&[1, c, h, w])?, &params)?;
        let activation = trace.output.reshape(&[self.spec.num_classes])?;
        let (reference_features, feature_deltas) = if with_reference {
            let reference = self.reference_features()?;
            let deltas = trace
                .nl_inputs
                .iter()
                .zip(&reference)
                .map(|(f, r)| f.sub(r))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (Some(reference), Some(deltas))
        } else {
            (None, None)
        };
        Ok(ForwardRecord {
            activation,
            feature_maps: trace.nl_inputs,
            nonlinear_outputs: trace.nl_outputs,
            reference_features,
            feature_deltas,
        })
    }

    /// Non-linear layer input features for the all-zero input.
    pub fn reference_features(&self) -> Result<Vec<Tensor>> {
        let [c, h, w] = self.spec.input_shape;
        let zero = Tensor::zeros(&[1, c, h, w]);
        Ok(self.run(&zero, &self.param_tensors())?.nl_inputs)
    }

    /// Logits of one normalized image, without recording a graph.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&image.detach(), false)?.activation.to_vec())
    }

    /// Logits for a batch of normalized images stored contiguously.
    pub fn logits_batch(&self, images: &[f64]) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = self.spec.input_shape;
        let per = c * h * w;
        if images.len() % per != 0 {
            return Err(Error::Shape(format!("{} values is not a whole number of images", images.len())));
        }
        let n = images.len() / per;
        let x = Tensor::new(&[n, c, h, w], images.to_vec())?;
        let out = self.run(&x, &self.param_tensors())?.output;
        Ok(out.data().chunks(self.spec.num_classes).map(<[f64]>::to_vec).collect())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }
}

/// Runs the layer stack on an N×C×H×W (or N×features) batch.
pub(crate) fn run_layers(spec: &ModelSpec, x: &Tensor, params: &[Option<(Tensor, Tensor)>]) -> Result<Trace> {
    let mut h = x.clone();
    let mut nl_inputs = Vec::new();
    let mut nl_outputs = Vec::new();
    for (layer, p) in spec.layers.iter().zip(params) {
        h = match (*layer, p) {
            (
                LayerSpec::Conv2d {
                    out_channels,
                    stride,
                    padding,
                    ..
                },
                Some((w, b)),
            ) => h
                .conv2d(w, Conv2dConfig { stride, padding })?
                .add(&b.reshape(&[out_channels, 1, 1])?)?,
            (LayerSpec::Linear { .. }, Some((w, b))) => h.matmul(&w.transpose()?)?.add(b)?,
            (LayerSpec::MaxPool { kernel, stride }, _) => {
                h.max_pool2d(PoolConfig { kernel, stride })?
            }
            (LayerSpec::AvgPool { kernel, stride }, _) => {
                h.avg_pool2d(PoolConfig { kernel, stride })?
            }
            (LayerSpec::Flatten, _) => h.flatten()?,
            (LayerSpec::Nonlinear(kind), _) => {
                let out = h.nonlinear(kind)?;
                nl_inputs.push(h);
                nl_outputs.push(out.clone());
                out
            }
            (l, None) => return Err(Error::Shape(format!("missing parameters for {l}"))),
        };
    }
    Ok(Trace {
        output: h,
        nl_inputs,
        nl_outputs,
    })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
