//! Attribution maps and the gradient/perturbation baseline methods.

use aprop_autodiff::{backward_from, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::learned::{self, OptimizeConfig, PluginArchitecture};
use crate::model::{run_layers, Model};

/// Signed per-pixel scores for one image, shaped like the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Vec<f64>,
    /// C, H, W
    pub shape: [usize; 3],
    pub method: String,
    pub target: usize,
}

impl AttributionMap {
    pub fn new(values: Vec<f64>, shape: [usize; 3], method: impl Into<String>, target: usize) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for map of shape {shape:?}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribution map".into()));
        }
        Ok(AttributionMap {
            values,
            shape,
            method: method.into(),
            target,
        })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.values.clone()).expect("map shape is consistent")
    }

    /// H×W map summed over channels.
    pub fn channel_sum(&self) -> Vec<f64> {
        let plane = self.shape[1] * self.shape[2];
        let mut out = vec![0.0; plane];
        for ch in self.values.chunks(plane) {
            for (o, v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        out
    }
}

fn check_target(model: &Model, target: usize) -> Result<()> {
    if target >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside 0..{}",
            model.num_classes()
        )));
    }
    Ok(())
}

fn check_image(model: &Model, image: &Tensor) -> Result<()> {
    if image.shape() != model.spec.input_shape {
        return Err(Error::Shape(format!(
            "image shape {:?}, model expects {:?}",
            image.shape(),
            model.spec.input_shape
        )));
    }
    Ok(())
}

/// `∂F_t/∂I` of one image via the single-sample forward and a one-hot seed.
pub fn input_gradient(model: &Model, image: &Tensor, target: usize) -> Result<Vec<f64>> {
    check_target(model, target)?;
    let graph = Graph::new();
    let x = graph.leaf(&image.detach());
    let rec = model.forward(&x, false)?;
    let g = aprop_autodiff::seed_backward(&rec.activation, target, &[&x], false)?;
    Ok(g[0].to_vec())
}

/// Input gradients for a batch of images stacked as N×C×H×W, each row seeded
/// one-hot at its own target. Returns the N×C×H×W gradient.
pub(crate) fn batch_input_gradients(model: &Model, images: &[f64], targets: &[usize]) -> Result<Vec<f64>> {
    let [c, h, w] = model.spec.input_shape;
    let n = targets.len();
    for &t in targets {
        check_target(model, t)?;
    }
    let graph = Graph::new();
    let x = graph.leaf(&Tensor::new(&[n, c, h, w], images.to_vec())?);
    let out = run_layers(&model.spec, &x, &model.param_tensors())?.output;
    let k = model.num_classes();
    let mut seed = vec![0.0; n * k];
    for (i, &t) in targets.iter().enumerate() {
        seed[i * k + t] = 1.0;
    }
    let g = backward_from(&out, Tensor::new(&[n, k], seed)?, &[&x], false)?;
    Ok(g[0].to_vec())
}

/// `|∂F_t/∂I|`.
pub fn saliency(model: &Model, image: &Tensor, target: usize) -> Result<AttributionMap> {
    check_image(model, image)?;
    let g = input_gradient(model, image, target)?;
    AttributionMap::new(g.iter().map(|v| v.abs()).collect(), model.spec.input_shape, "saliency", target)
}

/// `∂F_t/∂I ⊙ I`.
pub fn grad_x_input(model: &Model, image: &Tensor, target: usize) -> Result<AttributionMap> {
    check_image(model, image)?;
    let g = input_gradient(model, image, target)?;
    let values = g.iter().zip(image.data()).map(|(g, x)| g * x).collect();
    AttributionMap::new(values, model.spec.input_shape, "gradxinput", target)
}

/// Integrated gradients from the all-zero baseline with a right Riemann sum.
pub fn integrated_gradients(model: &Model, image: &Tensor, target: usize, steps: usize) -> Result<AttributionMap> {
    check_image(model, image)?;
    check_target(model, target)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let per = image.numel();
    let mut total = vec![0.0; per];
    // bounded batches keep memory flat for large step counts
    let chunk = 25;
    let mut k = 1;
    while k <= steps {
        let end = (k + chunk - 1).min(steps);
        let mut batch = Vec::with_capacity((end - k + 1) * per);
        for step in k..=end {
            let a = step as f64 / steps as f64;
            batch.extend(image.data().iter().map(|v| a * v));
        }
        let targets = vec![target; end - k + 1];
        let g = batch_input_gradients(model, &batch, &targets)?;
        for row in g.chunks(per) {
            for (t, v) in total.iter_mut().zip(row) {
                *t += v;
            }
        }
        k = end + 1;
    }
    let values = total
        .iter()
        .zip(image.data())
        .map(|(g, x)| x * (g / steps as f64))
        .collect();
    AttributionMap::new(values, model.spec.input_shape, "ig", target)
}

/// Default SmoothGrad noise: 0.15 × the image's value range.
pub fn default_noise(image: &Tensor) -> f64 {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    0.15 * (hi - lo)
}

/// Mean of `n` gradients (or squared gradients) at Gaussian-perturbed copies
/// of the image.
pub fn smooth_grad(
    model: &Model,
    image: &Tensor,
    target: usize,
    n: usize,
    sigma: f64,
    squared: bool,
    seed: u64,
) -> Result<AttributionMap> {
    check_image(model, image)?;
    check_target(model, target)?;
    if n == 0 {
        return Err(Error::InvalidArgument("smoothgrad needs at least one sample".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level {sigma} must be non-negative")));
    }
    let per = image.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut total = vec![0.0; per];
    let chunk = 25;
    let mut done = 0;
    while done < n {
        let m = chunk.min(n - done);
        let mut batch = Vec::with_capacity(m * per);
        for _ in 0..m {
            batch.extend(image.data().iter().map(|v| v + sigma * normal.sample(&mut rng)));
        }
        let g = batch_input_gradients(model, &batch, &vec![target; m])?;
        for row in g.chunks(per) {
            for (t, v) in total.iter_mut().zip(row) {
                *t += if squared { v * v } else { *v };
            }
        }
        done += m;
    }
    let values = total.iter().map(|t| t / n as f64).collect();
    let tag = if squared { "sqsg" } else { "smoothgrad" };
    AttributionMap::new(values, model.spec.input_shape, tag, target)
}

/// Drop in `F_t` when each `patch`×`patch` window (all channels) is set to
/// `fill`; windows move by `stride` and overlapping scores are averaged.
pub fn occlusion(
    model: &Model,
    image: &Tensor,
    target: usize,
    patch: usize,
    stride: usize,
    fill: f64,
) -> Result<AttributionMap> {
    check_image(model, image)?;
    check_target(model, target)?;
    let [c, h, w] = model.spec.input_shape;
    if patch == 0 || stride == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} with stride {stride} does not fit a {h}x{w} image"
        )));
    }
    let base = model.logits(image)?[target];
    let mut origins = Vec::new();
    for y in (0..=h - patch).step_by(stride) {
        for x in (0..=w - patch).step_by(stride) {
            origins.push((y, x));
        }
    }
    let per = c * h * w;
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0usize; h * w];
    for group in origins.chunks(64) {
        let mut batch = Vec::with_capacity(group.len() * per);
        for &(y0, x0) in group {
            let mut img = image.to_vec();
            for ch in 0..c {
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        img[ch * h * w + y * w + x] = fill;
                    }
                }
            }
            batch.extend(img);
        }
        let logits = model.logits_batch(&batch)?;
        for (&(y0, x0), l) in group.iter().zip(&logits) {
            let score = base - l[target];
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    sum[y * w + x] += score;
                    count[y * w + x] += 1;
                }
            }
        }
    }
    let plane: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect();
    let values = (0..c).flat_map(|_| plane.iter().copied()).collect();
    AttributionMap::new(values, model.spec.input_shape, "occlusion", target)
}

/// Uniform random scores; the uninformed reference arm of the evaluations.
pub fn random_map(shape: [usize; 3], target: usize, seed: u64) -> AttributionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..shape.iter().product::<usize>()).map(|_| rng.gen::<f64>()).collect();
    AttributionMap {
        values,
        shape,
        method: "random".into(),
        target,
    }
}

/// Seed for sample `index` of a run seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An attribution method with its settings.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Saliency,
    GradInput,
    IntegratedGradients { steps: usize },
    SmoothGrad { n: usize, sigma: Option<f64>, squared: bool, seed: u64 },
    Occlusion { patch: usize, stride: usize, fill: f64 },
    Learned(OptimizeConfig),
    Random { seed: u64 },
}

/// Images optimized together by the learned method; larger groups lose more
/// to cache misses than they save in per-node overhead.
const LEARNED_GROUP: usize = 4;

impl Method {
    /// Method by its command-line name, with default settings.
    pub fn from_name(name: &str, seed: u64) -> Result<Method> {
        Ok(match name {
            "saliency" => Method::Saliency,
            "gradxinput" => Method::GradInput,
            "ig" => Method::IntegratedGradients { steps: 50 },
            "smoothgrad" | "sqsg" => Method::SmoothGrad {
                n: 50,
                sigma: None,
                squared: name == "sqsg",
                seed,
            },
            "occlusion" => Method::Occlusion {
                patch: 4,
                stride: 4,
                fill: 0.0,
            },
            "learned" | "learned-shared" => Method::Learned(OptimizeConfig {
                architecture: if name == "learned" {
                    PluginArchitecture::PerElement
                } else {
                    PluginArchitecture::SharedPerChannel
                },
                seed,
                ..OptimizeConfig::default()
            }),
            "random" => Method::Random { seed },
            other => return Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::GradInput => "gradxinput",
            Method::IntegratedGradients { .. } => "ig",
            Method::SmoothGrad { squared: false, .. } => "smoothgrad",
            Method::SmoothGrad { squared: true, .. } => "sqsg",
            Method::Occlusion { .. } => "occlusion",
            Method::Learned(cfg) => match cfg.architecture {
                PluginArchitecture::PerElement => "learned",
                PluginArchitecture::SharedPerChannel => "learned-shared",
            },
            Method::Random { .. } => "random",
        }
    }

    /// Map for one image; `index` distinguishes samples for seeded methods.
    pub fn attribute(&self, model: &Model, image: &Tensor, target: usize, index: u64) -> Result<AttributionMap> {
        Ok(self.attribute_batch(model, std::slice::from_ref(image), &[target], &[index])?.remove(0))
    }

    /// Maps for several images. Every map equals what [`Method::attribute`]
    /// returns for the same image; the learned method optimizes small groups
    /// jointly, which is exact because samples never share plugin weights.
    pub fn attribute_batch(
        &self,
        model: &Model,
        images: &[Tensor],
        targets: &[usize],
        indices: &[u64],
    ) -> Result<Vec<AttributionMap>> {
        if images.len() != targets.len() || images.len() != indices.len() {
            return Err(Error::InvalidArgument("images, targets and indices differ in length".into()));
        }
        if let Method::Learned(cfg) = self {
            let mut maps = Vec::with_capacity(images.len());
            for (imgs, ts) in images.chunks(LEARNED_GROUP).zip(targets.chunks(LEARNED_GROUP)) {
                for r in learned::optimize_batch(model, imgs, ts, cfg)? {
                    maps.push(AttributionMap {
                        method: self.name().into(),
                        ..r.map
                    });
                }
            }
            return Ok(maps);
        }
        images
            .iter()
            .zip(targets)
            .zip(indices)
            .map(|((image, &t), &i)| self.attribute_one(model, image, t, i))
            .collect()
    }

    fn attribute_one(&self, model: &Model, image: &Tensor, target: usize, index: u64) -> Result<AttributionMap> {
        match *self {
            Method::Saliency => saliency(model, image, target),
            Method::GradInput => grad_x_input(model, image, target),
            Method::IntegratedGradients { steps } => integrated_gradients(model, image, target, steps),
            Method::SmoothGrad {
                n,
                sigma,
                squared,
                seed,
            } => {
                let sigma = sigma.unwrap_or_else(|| default_noise(image));
                smooth_grad(model, image, target, n, sigma, squared, sample_seed(seed, index))
            }
            Method::Occlusion { patch, stride, fill } => occlusion(model, image, target, patch, stride, fill),
            Method::Random { seed } => {
                check_image(model, image)?;
                check_target(model, target)?;
                Ok(random_map(model.spec.input_shape, target, sample_seed(seed, index)))
            }
            Method::Learned(_) => unreachable!("handled in attribute_batch"),
        }
    }
}
