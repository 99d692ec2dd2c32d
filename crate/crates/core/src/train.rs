//! Minibatch training with softmax cross-entropy.

use std::sync::Arc;

use aprop_autodiff::{backward, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, build_model, run_layers, Model, ModelSpec, Parameters};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
            epochs: 3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.optimizer {
            OptimizerConfig::Sgd(c) => c.lr > 0.0 && (0.0..1.0).contains(&c.momentum),
            OptimizerConfig::Adam(c) => {
                c.lr > 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps >= 0.0
            }
        };
        if !ok || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Progress information passed to the training observer after each step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

enum OptState {
    Sgd(Vec<Vec<f64>>),
    Adam(AdamState),
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`) for an
/// N×K logit matrix.
pub fn nll_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Shape(format!("logits must be N×K, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    let idx: Arc<[usize]> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    Ok(logits.log_softmax()?.gather(idx, &[n])?.mean()?.neg()?)
}

/// Trains freshly initialized parameters (`build_model(spec, cfg.seed)`).
pub fn train(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<Parameters> {
    let init = build_model(spec, cfg.seed)?;
    train_from(spec, init, dataset, cfg, |_| {})
}

/// Trains starting from `init`. The batch order is a seeded permutation per
/// epoch, so equal inputs give bit-identical parameters.
pub fn train_from(
    spec: &ModelSpec,
    init: Parameters,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(StepInfo),
) -> Result<Parameters> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.image_shape != spec.input_shape || dataset.num_classes > spec.num_classes {
        return Err(Error::Shape(format!(
            "dataset {:?} with {} classes does not fit model {:?} with {} classes",
            dataset.image_shape, dataset.num_classes, spec.input_shape, spec.num_classes
        )));
    }
    let data = dataset.normalize()?;
    let per = data.image_len();
    let [c, h, w] = spec.input_shape;

    let mut values = init.flat();
    let mut opt = match cfg.optimizer {
        OptimizerConfig::Sgd(_) => OptState::Sgd(values.iter().map(|v| vec![0.0; v.len()]).collect()),
        OptimizerConfig::Adam(_) => OptState::Adam(AdamState::new(values.iter().map(Vec::len))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * per);
            for &i in batch {
                x.extend_from_slice(data.image(i));
            }
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

            let graph = Graph::new();
            let current = init.with_values(values.clone())?;
            let mut leaves = Vec::new();
            let params: Vec<Option<(Tensor, Tensor)>> = current
                .layers
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        let wt = graph.leaf(&p.weight.tensor());
                        let bt = graph.leaf(&p.bias.tensor());
                        leaves.push(wt.clone());
                        leaves.push(bt.clone());
                        (wt, bt)
                    })
                })
                .collect();
            let input = Tensor::new(&[batch.len(), c, h, w], x)?;
            let logits = run_layers(spec, &input, &params)?.output;
            let loss = nll_loss(&logits, &labels)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            let wrt: Vec<&Tensor> = leaves.iter().collect();
            let grads: Vec<Vec<f64>> = backward(&loss, &wrt, false)?.iter().map(Tensor::to_vec).collect();
            match (&mut opt, cfg.optimizer) {
                (OptState::Sgd(vel), OptimizerConfig::Sgd(c)) => sgd_step(&mut values, &grads, vel, &c)?,
                (OptState::Adam(state), OptimizerConfig::Adam(c)) => adam_step(&mut values, &grads, state, &c)?,
                _ => unreachable!("optimizer state matches its config"),
            }
            observer(StepInfo {
                epoch,
                step,
                loss: loss_value,
            });
            step += 1;
        }
    }
    init.with_values(values)
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = dataset.denormalize().with_stats(model.norm.clone()).normalize()?;
    let per = data.image_len();
    let mut correct = 0usize;
    for (chunk_idx, chunk) in data.images.chunks(256 * per).enumerate() {
        for (j, logits) in model.logits_batch(chunk)?.iter().enumerate() {
            if argmax(logits) == data.labels[chunk_idx * 256 + j] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Normalization, Split};
    use crate::model::LayerSpec;

    fn linear_spec(inputs: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "linear".into(),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: inputs,
                    out_features: classes,
                },
            ],
            input_shape: [1, 1, inputs],
            num_classes: classes,
        }
    }

    #[test]
    fn nll_matches_hand_value() {
        let logits = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 3.0]).unwrap();
        let loss = nll_loss(&logits, &[0, 1]).unwrap().item().unwrap();
        let want = (2f64.ln() + (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-15);
        assert!(nll_loss(&logits, &[0, 2]).is_err());
    }

    #[test]
    fn one_sgd_step_on_linear_model_matches_closed_form() {
        let spec = linear_spec(2, 2);
        let data = Dataset::new(vec![1.0, 2.0, 3.0, 0.5], vec![1, 0], [1, 1, 2], 2, Split::Train)
            .unwrap()
            .with_stats(Normalization::identity(1));
        let init = build_model(&spec, 11).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::Sgd(SgdConfig { lr: 0.5, momentum: 0.0 }),
            epochs: 1,
            batch_size: 2,
            seed: 0,
        };
        let trained = train_from(&spec, init.clone(), &data, &cfg, |_| {}).unwrap();

        // hand computation: z = Wx + b, p = softmax(z), dL/dz = (p - y)/N
        let w0 = init.layers[1].as_ref().unwrap().weight.data.to_vec();
        let mut w = w0.clone();
        let mut b = vec![0.0, 0.0];
        let xs = [[1.0, 2.0], [3.0, 0.5]];
        let ys = [1usize, 0];
        for (x, &y) in xs.iter().zip(&ys) {
            let z: Vec<f64> = (0..2).map(|k| w0[2 * k] * x[0] + w0[2 * k + 1] * x[1]).collect();
            let m = z[0].max(z[1]);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s = e[0] + e[1];
            for k in 0..2 {
                let d = (e[k] / s - if k == y { 1.0 } else { 0.0 }) / 2.0;
                w[2 * k] -= 0.5 * d * x[0];
                w[2 * k + 1] -= 0.5 * d * x[1];
                b[k] -= 0.5 * d;
            }
        }
        let got = trained.layers[1].as_ref().unwrap();
        for (g, h) in got.weight.data.iter().zip(&w) {
            assert!((g - h).abs() < 1e-14);
        }
        for (g, h) in got.bias.data.iter().zip(&b) {
            assert!((g - h).abs() < 1e-14);
        }
    }

    #[test]
    fn single_sample_is_memorized() {
        let spec = linear_spec(4, 3);
        let data = Dataset::new(vec![0.2, -1.0, 0.7, 0.1], vec![2], [1, 1, 4], 3, Split::Train)
            .unwrap()
            .with_stats(Normalization::identity(1));
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::Adam(AdamConfig::with_lr(0.1)),
            epochs: 200,
            batch_size: 1,
            seed: 5,
        };
        let mut last = f64::INFINITY;
        train_from(&spec, build_model(&spec, 5).unwrap(), &data, &cfg, |s| last = s.loss).unwrap();
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = linear_spec(2, 2);
        let data = Dataset::new(vec![], vec![], [1, 1, 2], 2, Split::Train).unwrap();
        assert!(matches!(train(&spec, &data, &TrainConfig::default()), Err(Error::EmptyDataset)));
    }
}
