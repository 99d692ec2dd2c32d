//! Per-sample optimization of learnable backward rules for the non-linear
//! layers of a trained classifier, and the attribution map they produce.
//!
//! Each iteration runs four steps on one graph: the forward pass (plus the
//! reference pass on the all-zero input), a backward pass from the target
//! logit in which every non-linear layer's derivative is replaced by
//! `tanh(W ⊙ f̃)`, mask generation from the resulting attribution map, and
//! the sign-aware loss on the masked images. The loss is differentiated with
//! respect to the plugin weights `W` through the recorded backward pass.

use std::rc::Rc;
use std::sync::Arc;

use aprop_autodiff::{backward, backward_from, concat, BackwardRule, Graph, OverrideContext, Tensor};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::model::{run_layers, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PluginArchitecture {
    /// One weight per channel, shared over spatial positions.
    SharedPerChannel,
    /// One weight per feature-map element.
    PerElement,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            alpha: 0.75,
            beta: 0.25,
            gamma: 10.0,
            lambda: 0.1,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha)
            || !unit.contains(&self.beta)
            || self.beta >= self.alpha
            || !(self.gamma > 0.0 && self.gamma.is_finite())
            || !(self.lambda >= 0.0 && self.lambda.is_finite())
        {
            return Err(Error::InvalidArgument(format!("invalid mask parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub lr: f64,
    pub iterations: usize,
    pub mask: MaskParams,
    pub architecture: PluginArchitecture,
    /// Gate on `f - f_ref` instead of `f`.
    pub use_reference: bool,
    /// With `false`, only the positive branch (and its mask term) is used.
    pub sign_aware: bool,
    /// Score masked images by the softmax probability instead of the logit.
    pub post_softmax: bool,
    /// Recorded for reproducibility; plugin weights start at one, so the
    /// optimization itself draws no random numbers.
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            lr: 0.2,
            iterations: 30,
            mask: MaskParams::default(),
            architecture: PluginArchitecture::PerElement,
            use_reference: true,
            sign_aware: true,
            post_softmax: false,
            seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.iterations == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need iterations ≥ 1 and lr > 0, got {} and {}",
                self.iterations, self.lr
            )));
        }
        Ok(())
    }
}

/// Plugin weights for every non-linear layer of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginModule {
    pub architecture: PluginArchitecture,
    pub use_reference: bool,
    /// Weight shape per layer, without the batch dimension.
    pub shapes: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub adam: AdamState,
}

fn weight_shape(feature: &[usize], architecture: PluginArchitecture) -> Vec<usize> {
    match (architecture, feature) {
        (PluginArchitecture::SharedPerChannel, &[c, _, _]) => vec![c, 1, 1],
        _ => feature.to_vec(),
    }
}

/// One all-ones weight tensor per non-linear layer, in model order.
pub fn attach_plugins(
    model: &Model,
    architecture: PluginArchitecture,
    use_reference: bool,
    _seed: u64,
) -> Result<PluginModule> {
    let features = model.spec.nonlinear_shapes()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("model has no non-linear layers".into()));
    }
    let shapes: Vec<Vec<usize>> = features.iter().map(|f| weight_shape(f, architecture)).collect();
    let weights: Vec<Vec<f64>> = shapes.iter().map(|s| vec![1.0; s.iter().product()]).collect();
    let adam = AdamState::new(weights.iter().map(Vec::len));
    Ok(PluginModule {
        architecture,
        use_reference,
        shapes,
        weights,
        adam,
    })
}

/// `tanh(W ⊙ f̃) ⊙ grad_out` with `f̃ = f - f_ref` (or `f`).
pub fn plugin_backward(grad_out: &Tensor, f: &Tensor, f_ref: Option<&Tensor>, w: &Tensor) -> Result<Tensor> {
    Ok(gate(grad_out, f, f_ref, w)?)
}

fn gate(grad_out: &Tensor, f: &Tensor, f_ref: Option<&Tensor>, w: &Tensor) -> aprop_autodiff::Result<Tensor> {
    let f_tilde = match f_ref {
        Some(r) => f.sub(r)?,
        None => f.clone(),
    };
    w.mul(&f_tilde)?.tanh()?.mul(grad_out)
}

struct PluginRule;

impl BackwardRule for PluginRule {
    fn backward(&self, ctx: &OverrideContext<'_>) -> aprop_autodiff::Result<Tensor> {
        gate(ctx.grad_out, ctx.input, ctx.reference, &ctx.params[0])
    }
}

/// Channel-summed, min-max scaled attribution: C×H×W → H×W in `[0, 1]`.
/// A constant map scales to 0.5 everywhere.
pub fn scale_attribution(a: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = a.shape() else {
        return Err(Error::Shape(format!("attribution must be C×H×W, got {:?}", a.shape())));
    };
    Ok(scale_rows(&a.reshape(&[1, c, h, w])?)?.reshape(&[h, w])?)
}

/// B×C×H×W → B×(H·W), each row scaled on its own.
fn scale_rows(a: &Tensor) -> Result<Tensor> {
    let &[b, _, h, w] = a.shape() else {
        return Err(Error::Shape(format!("expected B×C×H×W, got {:?}", a.shape())));
    };
    let n = h * w;
    let summed = a.sum_to(&[b, 1, h, w])?.reshape(&[b, n])?;
    let mut arg_max = Vec::with_capacity(b);
    let mut arg_min = Vec::with_capacity(b);
    let mut degenerate = Vec::with_capacity(b);
    for (r, row) in summed.data().chunks(n).enumerate() {
        let (mut hi, mut lo) = (0, 0);
        for (i, &v) in row.iter().enumerate() {
            if v > row[hi] {
                hi = i;
            }
            if v < row[lo] {
                lo = i;
            }
        }
        arg_max.push(r * n + hi);
        arg_min.push(r * n + lo);
        degenerate.push(row[hi] == row[lo]);
    }
    let arg_max: Arc<[usize]> = arg_max.into();
    let arg_min: Arc<[usize]> = arg_min.into();
    let hi = summed.gather(arg_max, &[b, 1])?;
    let lo = summed.gather(arg_min, &[b, 1])?;
    let mut range = hi.sub(&lo)?;
    let mut scaled;
    if degenerate.iter().any(|&d| d) {
        let pad = Tensor::new(&[b, 1], degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect())?;
        range = range.add(&pad)?;
        scaled = summed.sub(&lo)?.div(&range)?;
        let half = Tensor::new(&[b, 1], degenerate.iter().map(|&d| if d { 0.5 } else { 0.0 }).collect())?;
        scaled = scaled.add(&half)?;
    } else {
        scaled = summed.sub(&lo)?.div(&range)?;
    }
    Ok(scaled)
}

/// Positive and negative keep-masks, shaped like the scaled map.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub positive: Tensor,
    pub negative: Tensor,
}

/// `M^p = 1 - σ(γ(A - α))`, `M^n = σ(γ(A - β))`.
pub fn generate_masks(scaled: &Tensor, params: &MaskParams) -> Result<MaskPair> {
    let positive = scaled
        .add_scalar(-params.alpha)?
        .scale(params.gamma)?
        .sigmoid()?
        .rsub_scalar(1.0)?;
    let negative = scaled.add_scalar(-params.beta)?.scale(params.gamma)?.sigmoid()?;
    Ok(MaskPair { positive, negative })
}

/// Gaussian-weighted average of an H×W map:
/// `M(u) = Σ_v S(u - v) A(v) / Σ_v S(u - v)` with `S(d) = exp(-‖d‖² / 2σ²)`.
pub fn gaussian_mask(a: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {sigma} must be positive")));
    }
    let &[h, w] = a.shape() else {
        return Err(Error::Shape(format!("expected an H×W map, got {:?}", a.shape())));
    };
    // the kernel factorizes over rows and columns: M = K_h A K_w / (K_h 1 K_w)
    let kernel = |n: usize| -> (Tensor, Vec<f64>) {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = i as f64 - j as f64;
                k[i * n + j] = (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
        let sums = k.chunks(n).map(|r| r.iter().sum()).collect();
        (Tensor::new(&[n, n], k).expect("square kernel"), sums)
    };
    let (kh, sh) = kernel(h);
    let (kw, sw) = kernel(w);
    let norm: Vec<f64> = sh.iter().flat_map(|a| sw.iter().map(move |b| a * b)).collect();
    Ok(kh.matmul(a)?.matmul(&kw)?.div(&Tensor::new(&[h, w], norm)?)?)
}

/// `mean|1 - M^p| + mean|1 - M^n|`.
pub fn mask_loss(masks: &MaskPair) -> Result<Tensor> {
    let p = masks.positive.rsub_scalar(1.0)?.abs()?.mean()?;
    let n = masks.negative.rsub_scalar(1.0)?.abs()?.mean()?;
    Ok(p.add(&n)?)
}

/// Scores `F_t` of every row of an N×C×H×W batch, shape `[N]`.
fn class_scores(model: &Model, x: &Tensor, targets: &[usize], post_softmax: bool) -> Result<Tensor> {
    let mut out = run_layers(&model.spec, x, &model.param_tensors())?.output;
    if post_softmax {
        out = out.softmax()?;
    }
    let k = model.num_classes();
    let idx: Arc<[usize]> = targets.iter().enumerate().map(|(i, &t)| i * k + t).collect();
    Ok(out.gather(idx, &[targets.len()])?)
}

/// `(L^p, L^n)` for one C×H×W image and H×W masks, scored on the logit.
pub fn sign_aware_loss(model: &Model, image: &Tensor, masks: &MaskPair, target: usize) -> Result<(Tensor, Tensor)> {
    check_target(model, target)?;
    let [c, h, w] = model.spec.input_shape;
    if image.shape() != [c, h, w] || masks.positive.shape() != [h, w] || masks.negative.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "image {:?} and masks {:?}/{:?} do not fit input {:?}",
            image.shape(),
            masks.positive.shape(),
            masks.negative.shape(),
            model.spec.input_shape
        )));
    }
    let batch = |t: Tensor| t.reshape(&[1, c, h, w]);
    let base = class_scores(model, &batch(image.clone())?, &[target], false)?;
    let fp = class_scores(model, &batch(image.mul(&masks.positive)?)?, &[target], false)?;
    let fn_ = class_scores(model, &batch(image.mul(&masks.negative)?)?, &[target], false)?;
    Ok((fp.sub(&base)?.reshape(&[])?, base.sub(&fn_)?.reshape(&[])?))
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

/// Values of the loss terms at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub positive: f64,
    pub negative: f64,
    pub mask: f64,
    pub total: f64,
}

/// Final masks as plain H×W arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskValues {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// H, W
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionResult {
    pub map: AttributionMap,
    pub masks: MaskValues,
    /// Loss before each optimizer step.
    pub loss_trace: Vec<LossTerms>,
    /// Loss at the optimized weights.
    pub final_loss: LossTerms,
    pub plugins: PluginModule,
}

/// Everything shared by the iterations of one (batched) optimization.
struct Problem<'a> {
    model: &'a Model,
    images: Tensor,
    targets: Vec<usize>,
    /// `F_t(I)` per sample, a constant.
    base: Tensor,
    references: Option<Vec<Tensor>>,
    /// Per-layer weight shape including the batch dimension.
    shapes: Vec<Vec<usize>>,
    cfg: &'a OptimizeConfig,
}

struct Evaluation {
    terms: Vec<LossTerms>,
    grads: Option<Vec<Vec<f64>>>,
    attribution: Vec<f64>,
    positive: Vec<f64>,
    negative: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(model: &'a Model, images: &[Tensor], targets: &[usize], cfg: &'a OptimizeConfig) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() || images.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images with {} targets",
                images.len(),
                targets.len()
            )));
        }
        let [c, h, w] = model.spec.input_shape;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != [c, h, w] {
                return Err(Error::Shape(format!(
                    "image shape {:?}, model expects {:?}",
                    img.shape(),
                    model.spec.input_shape
                )));
            }
            data.extend_from_slice(img.data());
        }
        for &t in targets {
            check_target(model, t)?;
        }
        let b = images.len();
        let images = Tensor::new(&[b, c, h, w], data)?;
        let base = class_scores(model, &images, targets, cfg.post_softmax)?;
        let references = if cfg.use_reference {
            Some(model.reference_features()?)
        } else {
            None
        };
        let features = model.spec.nonlinear_shapes()?;
        if features.is_empty() {
            return Err(Error::InvalidArgument("model has no non-linear layers".into()));
        }
        let shapes = features
            .iter()
            .map(|f| {
                let mut s = vec![b];
                s.extend(weight_shape(f, cfg.architecture));
                s
            })
            .collect();
        Ok(Problem {
            model,
            images,
            targets: targets.to_vec(),
            base,
            references,
            shapes,
            cfg,
        })
    }

    fn batch(&self) -> usize {
        self.targets.len()
    }

    /// Steps 1–2: input gradient under the plugin rules, times the input.
    fn attribution(&self, graph: &Graph, weights: &[Vec<f64>], create_graph: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let x = graph.leaf(&self.images);
        let trace = run_layers(&self.model.spec, &x, &self.model.param_tensors())?;
        let rule: Rc<dyn BackwardRule> = Rc::new(PluginRule);
        let mut leaves = Vec::with_capacity(weights.len());
        for (l, out) in trace.nl_outputs.iter().enumerate() {
            let w = graph.leaf(&Tensor::new(&self.shapes[l], weights[l].clone())?);
            let reference = self.references.as_ref().map(|r| &r[l]);
            graph.register_override(out, rule.clone(), reference, std::slice::from_ref(&w))?;
            leaves.push(w);
        }
        let mut out = trace.output;
        if self.cfg.post_softmax {
            out = out.softmax()?;
        }
        let k = self.model.num_classes();
        let mut seed = vec![0.0; self.batch() * k];
        for (i, &t) in self.targets.iter().enumerate() {
            seed[i * k + t] = 1.0;
        }
        let grad = backward_from(&out, Tensor::new(&[self.batch(), k], seed)?, &[&x], create_graph)?.remove(0);
        Ok((grad.mul(&self.images)?, leaves))
    }

    /// Steps 1–4 at `weights`; with `train`, also the weight gradients.
    fn evaluate(&self, weights: &[Vec<f64>], train: bool) -> Result<Evaluation> {
        let graph = Graph::new();
        let (a, leaves) = self.attribution(&graph, weights, train)?;
        let b = self.batch();
        let [_, h, w] = self.model.spec.input_shape;
        let n = h * w;
        let p = &self.cfg.mask;

        let scaled = scale_rows(&a)?.reshape(&[b, 1, h, w])?;
        let masks = generate_masks(&scaled, p)?;
        let xp = self.images.mul(&masks.positive)?;
        let xn = self.images.mul(&masks.negative)?;
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&self.targets);
        let scores = class_scores(self.model, &concat(&[&xp, &xn], 0)?, &targets, self.cfg.post_softmax)?;
        let lp = scores.slice(0, 0, b)?.sub(&self.base)?;
        let ln = self.base.sub(&scores.slice(0, b, 2 * b)?)?;
        let row_mean = |m: &Tensor| -> Result<Tensor> {
            Ok(m.rsub_scalar(1.0)?.abs()?.reshape(&[b, n])?.sum_last_dim()?.reshape(&[b])?.div(&Tensor::scalar(n as f64))?)
        };
        let mp = row_mean(&masks.positive)?;
        let (per_sample, lm) = if self.cfg.sign_aware {
            let lm = mp.add(&row_mean(&masks.negative)?)?;
            (lp.add(&ln)?.add(&lm.scale(p.lambda)?)?, lm)
        } else {
            (lp.add(&mp.scale(p.lambda)?)?, mp)
        };
        debug_assert_eq!(per_sample.shape(), [b]);
        let terms: Vec<LossTerms> = (0..b)
            .map(|i| LossTerms {
                positive: lp.data()[i],
                negative: ln.data()[i],
                mask: lm.data()[i],
                total: per_sample.data()[i],
            })
            .collect();
        if let Some(i) = terms.iter().position(|t| !t.total.is_finite()) {
            return Err(Error::NonFinite(format!("loss of sample {i} is {:?}", terms[i])));
        }
        let grads = if train {
            let total = per_sample.sum()?;
            let wrt: Vec<&Tensor> = leaves.iter().collect();
            let g: Vec<Vec<f64>> = backward(&total, &wrt, false)?.iter().map(Tensor::to_vec).collect();
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("plugin weight gradient".into()));
            }
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            terms,
            grads,
            attribution: a.to_vec(),
            positive: masks.positive.to_vec(),
            negative: masks.negative.to_vec(),
        })
    }
}

/// Splits per-layer batched weights into per-sample weights.
fn split_weights(weights: &[Vec<f64>], b: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|i| {
            weights
                .iter()
                .map(|w| {
                    let per = w.len() / b;
                    w[i * per..(i + 1) * per].to_vec()
                })
                .collect()
        })
        .collect()
}

fn join_weights(plugins: &[&PluginModule]) -> Vec<Vec<f64>> {
    (0..plugins[0].weights.len())
        .map(|l| plugins.iter().flat_map(|p| p.weights[l].iter().copied()).collect())
        .collect()
}

/// Attribution map `A = ∂F_t/∂I ⊙ I` with the plugin rules in place.
pub fn compute_attribution(
    model: &Model,
    plugins: &PluginModule,
    image: &Tensor,
    target: usize,
) -> Result<AttributionMap> {
    let cfg = OptimizeConfig {
        architecture: plugins.architecture,
        use_reference: plugins.use_reference,
        ..OptimizeConfig::default()
    };
    let problem = Problem::new(model, std::slice::from_ref(image), &[target], &cfg)?;
    check_layout(&problem, plugins)?;
    let (a, _) = problem.attribution(&Graph::new(), &plugins.weights, false)?;
    AttributionMap::new(a.to_vec(), model.spec.input_shape, "learned", target)
}

fn check_layout(problem: &Problem<'_>, plugins: &PluginModule) -> Result<()> {
    let ok = plugins.weights.len() == problem.shapes.len()
        && plugins
            .weights
            .iter()
            .zip(&problem.shapes)
            .all(|(w, s)| w.len() * problem.batch() == s.iter().product::<usize>());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("plugin weights do not match the model's non-linear layers".into()))
    }
}

/// Total loss and its gradient with respect to each plugin weight tensor,
/// for one image.
pub fn loss_and_gradient(
    model: &Model,
    plugins: &PluginModule,
    image: &Tensor,
    target: usize,
    cfg: &OptimizeConfig,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let cfg = OptimizeConfig {
        architecture: plugins.architecture,
        use_reference: plugins.use_reference,
        ..cfg.clone()
    };
    let problem = Problem::new(model, std::slice::from_ref(image), &[target], &cfg)?;
    check_layout(&problem, plugins)?;
    let ev = problem.evaluate(&plugins.weights, true)?;
    Ok((ev.terms[0], ev.grads.expect("requested gradients")))
}

/// Optimizes fresh plugins for one image and returns the final attribution.
pub fn optimize(model: &Model, image: &Tensor, target: usize, cfg: &OptimizeConfig) -> Result<AttributionResult> {
    Ok(optimize_batch(model, std::slice::from_ref(image), &[target], cfg)?.remove(0))
}

/// Optimizes independent plugins for several images at once. Each sample's
/// loss depends only on its own plugin weights and Adam acts elementwise, so
/// this matches running [`optimize`] per image.
pub fn optimize_batch(
    model: &Model,
    images: &[Tensor],
    targets: &[usize],
    cfg: &OptimizeConfig,
) -> Result<Vec<AttributionResult>> {
    let problem = Problem::new(model, images, targets, cfg)?;
    let b = problem.batch();
    let template = attach_plugins(model, cfg.architecture, cfg.use_reference, cfg.seed)?;
    let mut weights = join_weights(&vec![&template; b]);
    let mut adam = AdamState::new(weights.iter().map(Vec::len));
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut traces = vec![Vec::with_capacity(cfg.iterations); b];
    for _ in 0..cfg.iterations {
        let ev = problem.evaluate(&weights, true)?;
        for (trace, t) in traces.iter_mut().zip(ev.terms) {
            trace.push(t);
        }
        adam_step(&mut weights, &ev.grads.expect("requested gradients"), &mut adam, &adam_cfg)?;
    }
    let last = problem.evaluate(&weights, false)?;
    let [c, h, w] = model.spec.input_shape;
    let (per_img, per_mask) = (c * h * w, h * w);
    let sample_weights = split_weights(&weights, b);
    let sample_m = split_weights(&adam.m, b);
    let sample_v = split_weights(&adam.v, b);
    let mut out = Vec::with_capacity(b);
    for (i, trace) in traces.into_iter().enumerate() {
        let map = AttributionMap::new(
            last.attribution[i * per_img..(i + 1) * per_img].to_vec(),
            model.spec.input_shape,
            "learned",
            targets[i],
        )?;
        out.push(AttributionResult {
            map,
            masks: MaskValues {
                positive: last.positive[i * per_mask..(i + 1) * per_mask].to_vec(),
                negative: last.negative[i * per_mask..(i + 1) * per_mask].to_vec(),
                shape: [h, w],
            },
            loss_trace: trace,
            final_loss: last.terms[i],
            plugins: PluginModule {
                weights: sample_weights[i].clone(),
                adam: AdamState {
                    step: adam.step,
                    m: sample_m[i].clone(),
                    v: sample_v[i].clone(),
                },
                ..template.clone()
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;
    use crate::model::{build_model, LayerSpec, ModelSpec};
    use aprop_autodiff::NonlinearKind;

    #[test]
    fn masks_at_center_points() {
        let p = MaskParams::default();
        let a = Tensor::new(&[3], vec![0.75, 0.25, 1.0]).unwrap();
        let m = generate_masks(&a, &p).unwrap();
        assert!((m.positive.data()[0] - 0.5).abs() < 1e-12);
        assert!((m.negative.data()[1] - 0.5).abs() < 1e-12);
        // 1 - σ(2.5) = σ(-2.5) = 1 / (1 + e^2.5)
        assert!((m.positive.data()[2] - 0.07585818002124355).abs() < 1e-12);
    }

    #[test]
    fn masks_harden_at_large_gamma() {
        let p = MaskParams {
            gamma: 1e4,
            ..MaskParams::default()
        };
        let values: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).filter(|v| (v - 0.75f64).abs() > 1e-3).collect();
        let m = generate_masks(&Tensor::new(&[values.len()], values.clone()).unwrap(), &p).unwrap();
        for (v, mp) in values.iter().zip(m.positive.data()) {
            let hard = if *v < 0.75 { 1.0 } else { 0.0 };
            assert!((mp - hard).abs() < 1e-3, "{v}: {mp}");
        }
    }

    #[test]
    fn scaling() {
        let a = Tensor::new(&[1, 1, 3], vec![-2.0, 0.0, 2.0]).unwrap();
        assert_eq!(scale_attribution(&a).unwrap().data(), &[0.0, 0.5, 1.0]);
        let flat = Tensor::full(&[2, 2, 2], 3.0);
        assert_eq!(scale_attribution(&flat).unwrap().data(), &[0.5; 4]);
        // channel sums [1+2+0, 0+1+1, 4-1+0, 2+2+2] = [3, 2, 3, 6]
        let rgb = Tensor::new(&[3, 2, 2], vec![1.0, 0.0, 4.0, 2.0, 2.0, 1.0, -1.0, 2.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(scale_attribution(&rgb).unwrap().data(), &[0.25, 0.0, 0.25, 1.0]);
    }

    #[test]
    fn gaussian_mask_limits() {
        let c = Tensor::full(&[4, 5], 0.3);
        for v in gaussian_mask(&c, 1.7).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
        let a = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.25, 0.5]).unwrap();
        let m = gaussian_mask(&a, 0.05).unwrap();
        for (x, y) in m.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(gaussian_mask(&a, 0.0).is_err());
    }

    #[test]
    fn mask_loss_values() {
        let pair = |p: f64, n: f64| MaskPair {
            positive: Tensor::full(&[3, 3], p),
            negative: Tensor::full(&[3, 3], n),
        };
        assert_eq!(mask_loss(&pair(1.0, 1.0)).unwrap().item().unwrap(), 0.0);
        assert_eq!(mask_loss(&pair(0.0, 0.0)).unwrap().item().unwrap(), 2.0);
        assert_eq!(mask_loss(&pair(0.75, 0.5)).unwrap().item().unwrap(), 0.75);
        let zeros = MaskPair {
            positive: Tensor::zeros(&[28, 28]),
            negative: Tensor::zeros(&[28, 28]),
        };
        assert_eq!(mask_loss(&zeros).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn plugin_gate() {
        let g = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let f = Tensor::new(&[4], vec![0.3, -0.1, 2.0, -4.0]).unwrap();
        let zero = plugin_backward(&g, &f, Some(&f), &Tensor::ones(&[4])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let sat = plugin_backward(&g, &f, None, &Tensor::full(&[4], 1e6)).unwrap();
        assert_eq!(sat.data(), &[1.0, 2.0, 3.0, -0.5]);
    }

    fn small_cnn() -> Model {
        let relu = LayerSpec::Nonlinear(NonlinearKind::Relu);
        let spec = ModelSpec {
            name: "toy".into(),
            layers: vec![
                LayerSpec::conv(1, 3, 3, 0),
                relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::conv(3, 4, 2, 0),
                LayerSpec::Nonlinear(NonlinearKind::Tanh),
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 4 * 2 * 2,
                    out_features: 3,
                },
            ],
            input_shape: [1, 8, 8],
            num_classes: 3,
        };
        let mut p = build_model(&spec, 21).unwrap();
        let values: Vec<Vec<f64>> = p
            .flat()
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 1 { v.iter().map(|_| 0.05 * i as f64).collect() } else { v })
            .collect();
        p = p.with_values(values).unwrap();
        Model::new(spec, p, Normalization::identity(1)).unwrap()
    }

    fn toy_image(seed: u64) -> Tensor {
        let r = crate::attribution::random_map([1, 8, 8], 0, seed);
        Tensor::new(&[1, 8, 8], r.values.iter().map(|v| 2.0 * v - 0.5).collect()).unwrap()
    }

    #[test]
    fn attach_counts_and_shapes() {
        let m = small_cnn();
        let shared = attach_plugins(&m, PluginArchitecture::SharedPerChannel, true, 0).unwrap();
        assert_eq!(shared.shapes, vec![vec![3, 1, 1], vec![4, 1, 1]]);
        let full = attach_plugins(&m, PluginArchitecture::PerElement, true, 0).unwrap();
        assert_eq!(full.shapes, vec![vec![3, 6, 6], vec![4, 2, 2]]);
        assert!(full.weights.iter().flatten().all(|&w| w == 1.0));

        let spec = ModelSpec {
            name: "linear".into(),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 2,
                },
            ],
            input_shape: [1, 2, 2],
            num_classes: 2,
        };
        let lin = Model::new(spec.clone(), build_model(&spec, 0).unwrap(), Normalization::identity(1)).unwrap();
        assert!(attach_plugins(&lin, PluginArchitecture::PerElement, false, 0).is_err());
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let m = small_cnn();
        let plugins = attach_plugins(&m, PluginArchitecture::PerElement, false, 0).unwrap();
        let a = compute_attribution(&m, &plugins, &Tensor::zeros(&[1, 8, 8]), 1).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
        assert!(compute_attribution(&m, &plugins, &toy_image(1), 3).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = small_cnn();
        let img = toy_image(2);
        let cfg = OptimizeConfig::default();
        for arch in [PluginArchitecture::SharedPerChannel, PluginArchitecture::PerElement] {
            let mut plugins = attach_plugins(&m, arch, true, 0).unwrap();
            // move away from the all-ones start so every gate is generic
            for (l, w) in plugins.weights.iter_mut().enumerate() {
                for (i, v) in w.iter_mut().enumerate() {
                    *v = 0.6 + 0.13 * ((i + 3 * l) % 7) as f64;
                }
            }
            let (_, grads) = loss_and_gradient(&m, &plugins, &img, 0, &cfg).unwrap();
            let h = 1e-5;
            for l in 0..plugins.weights.len() {
                for i in (0..plugins.weights[l].len()).step_by(5) {
                    let mut up = plugins.clone();
                    up.weights[l][i] += h;
                    let mut down = plugins.clone();
                    down.weights[l][i] -= h;
                    let fu = loss_and_gradient(&m, &up, &img, 0, &cfg).unwrap().0.total;
                    let fd = loss_and_gradient(&m, &down, &img, 0, &cfg).unwrap().0.total;
                    let numeric = (fu - fd) / (2.0 * h);
                    let analytic = grads[l][i];
                    assert!(
                        (numeric - analytic).abs() <= 1e-5 + 1e-4 * analytic.abs().max(numeric.abs()),
                        "{arch:?} layer {l} index {i}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let m = small_cnn();
        let cfg = OptimizeConfig {
            iterations: 4,
            ..OptimizeConfig::default()
        };
        let images = [toy_image(3), toy_image(4)];
        let batch = optimize_batch(&m, &images, &[0, 2], &cfg).unwrap();
        for (i, (img, t)) in images.iter().zip([0, 2]).enumerate() {
            let single = optimize(&m, img, t, &cfg).unwrap();
            assert_eq!(single.loss_trace.len(), 4);
            for (a, b) in single.map.values.iter().zip(&batch[i].map.values) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn one_iteration_moves_the_weights() {
        let m = small_cnn();
        let cfg = OptimizeConfig {
            iterations: 1,
            ..OptimizeConfig::default()
        };
        let r = optimize(&m, &toy_image(5), 1, &cfg).unwrap();
        assert_eq!(r.plugins.adam.step, 1);
        assert!(r.plugins.weights.iter().flatten().any(|&w| w != 1.0));
        assert!(r.loss_trace[0].total.is_finite());
    }

    #[test]
    fn identity_gates_reduce_to_grad_x_input() {
        // bias-free linear layer followed by relu and a positive-weight head
        let spec = ModelSpec {
            name: "gate".into(),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 3,
                },
                LayerSpec::Nonlinear(NonlinearKind::Relu),
                LayerSpec::Linear {
                    in_features: 3,
                    out_features: 2,
                },
            ],
            input_shape: [1, 2, 2],
            num_classes: 2,
        };
        let params = build_model(&spec, 0)
            .unwrap()
            .with_values(vec![
                vec![0.2, 0.5, 0.1, 0.4, 0.3, 0.3, 0.6, 0.1, 0.9, 0.2, 0.2, 0.7],
                vec![0.0; 3],
                vec![0.5, 1.5, 0.25, 1.0, 0.1, 2.0],
                vec![0.0; 2],
            ])
            .unwrap();
        let m = Model::new(spec, params, Normalization::identity(1)).unwrap();
        let img = Tensor::new(&[1, 2, 2], vec![0.4, 1.2, 0.3, 0.8]).unwrap();
        let mut plugins = attach_plugins(&m, PluginArchitecture::PerElement, false, 0).unwrap();
        plugins.weights[0] = vec![1e6; 3];
        let a = compute_attribution(&m, &plugins, &img, 0).unwrap();
        let gxi = crate::attribution::grad_x_input(&m, &img, 0).unwrap();
        assert_eq!(a.values, gxi.values);
    }

    #[test]
    fn sign_aware_loss_with_identity_masks_is_zero() {
        let m = small_cnn();
        let img = toy_image(6);
        let ones = MaskPair {
            positive: Tensor::ones(&[8, 8]),
            negative: Tensor::ones(&[8, 8]),
        };
        let (lp, ln) = sign_aware_loss(&m, &img, &ones, 2).unwrap();
        assert_eq!(lp.item().unwrap(), 0.0);
        assert_eq!(ln.item().unwrap(), 0.0);
    }
}
