//! Perturbation curves (MoRF/LeRF), their area, and remove-and-retrain.

use aprop_autodiff::Tensor;

use crate::attribution::{AttributionMap, Method};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, ModelSpec};
use crate::train::{accuracy, train, TrainConfig};

/// Largest removed fraction on the MoRF/LeRF curves.
pub const CURVE_SPAN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Highest attribution removed first.
    MostFirst,
    /// Lowest (most negative) attribution removed first.
    LeastFirst,
}

/// Number of pixels removed at `fraction` of `pixels`.
pub fn removal_count(fraction: f64, pixels: usize) -> usize {
    // the small slack absorbs products like 0.35·20 landing just above an integer
    ((fraction * pixels as f64 - 1e-9).ceil().max(0.0) as usize).min(pixels)
}

/// Pixel indices of an H×W score map in removal order. Ties go to the lower
/// index in both orders.
pub fn removal_order(scores: &[f64], order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_value = match order {
            Order::MostFirst => scores[b].total_cmp(&scores[a]),
            Order::LeastFirst => scores[a].total_cmp(&scores[b]),
        };
        by_value.then(a.cmp(&b))
    });
    idx
}

/// Sets the first `count` pixels of `ranked` to `fill` (per channel) in a
/// C×H×W buffer.
fn fill_pixels(image: &mut [f64], channels: usize, ranked: &[usize], count: usize, fill: &[f64]) {
    let plane = image.len() / channels;
    for &p in &ranked[..count] {
        for (ch, f) in fill.iter().enumerate().take(channels) {
            image[ch * plane + p] = *f;
        }
    }
}

/// Copy of a C×H×W image with `⌈fraction·H·W⌉` pixels (all channels) set to
/// `fill`, chosen by the channel-summed attribution in the given order.
pub fn perturb_topk(
    image: &Tensor,
    attribution: &AttributionMap,
    fraction: f64,
    order: Order,
    fill: &[f64],
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")));
    }
    if image.shape() != attribution.shape || fill.len() != attribution.shape[0] {
        return Err(Error::Shape(format!(
            "image {:?}, map {:?} and {} fill values disagree",
            image.shape(),
            attribution.shape,
            fill.len()
        )));
    }
    let scores = attribution.channel_sum();
    let count = removal_count(fraction, scores.len());
    let mut out = image.to_vec();
    fill_pixels(&mut out, attribution.shape[0], &removal_order(&scores, order), count, fill);
    Ok(Tensor::new(image.shape(), out)?)
}

/// Mean retained-activation ratio at each removed fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    /// `(fraction, mean F_t(perturbed) / F_t(I))`
    pub points: Vec<(f64, f64)>,
    pub n_samples: usize,
    /// Samples left out because `|F_t(I)| < 1e-6`.
    pub skipped: usize,
}

/// Fractions `(i / steps)·0.05` for `i = 0..=steps`.
pub fn curve_fractions(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64 * CURVE_SPAN).collect()
}

/// Retained ratios of one sample at every fraction, or `None` when its
/// reference activation is too small to divide by.
pub fn sample_ratios(
    model: &Model,
    image: &Tensor,
    map: &AttributionMap,
    target: usize,
    order: Order,
    fractions: &[f64],
) -> Result<Option<Vec<f64>>> {
    let base = model.logits(image)?[target];
    if base.abs() < 1e-6 {
        return Ok(None);
    }
    let fill = vec![0.0; model.spec.input_shape[0]];
    let mut batch = Vec::with_capacity(fractions.len() * image.numel());
    for &f in fractions {
        batch.extend_from_slice(perturb_topk(image, map, f, order, &fill)?.data());
    }
    let logits = model.logits_batch(&batch)?;
    Ok(Some(logits.iter().map(|l| l[target] / base).collect()))
}

/// MoRF or LeRF curve of precomputed maps. Each map's `target` must be the
/// class whose activation is tracked. Images are normalized model inputs,
/// so removal sets pixels to the dataset mean.
pub fn curve(model: &Model, images: &[Tensor], maps: &[AttributionMap], order: Order, steps: usize) -> Result<Curve> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != maps.len() || steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} images, {} maps, {steps} steps",
            images.len(),
            maps.len()
        )));
    }
    let fractions = curve_fractions(steps);
    let rows: Vec<Option<Vec<f64>>> = images
        .iter()
        .zip(maps)
        .map(|(img, map)| sample_ratios(model, img, map, map.target, order, &fractions))
        .collect::<Result<_>>()?;
    aggregate(&fractions, &rows)
}

/// Mean over the non-skipped rows.
pub fn aggregate(fractions: &[f64], rows: &[Option<Vec<f64>>]) -> Result<Curve> {
    let kept: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let points = fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, kept.iter().map(|r| r[i]).sum::<f64>() / kept.len() as f64))
        .collect();
    Ok(Curve {
        points,
        n_samples: kept.len(),
        skipped: rows.len() - kept.len(),
    })
}

/// Predicted class of every image.
pub fn predicted_classes(model: &Model, images: &[Tensor]) -> Result<Vec<usize>> {
    images.iter().map(|img| Ok(argmax(&model.logits(img)?))).collect()
}

fn method_curve(model: &Model, images: &[Tensor], method: &Method, order: Order, steps: usize) -> Result<Curve> {
    let targets = predicted_classes(model, images)?;
    let indices: Vec<u64> = (0..images.len() as u64).collect();
    let maps = method.attribute_batch(model, images, &targets, &indices)?;
    curve(model, images, &maps, order, steps)
}

/// Most-relevant-first curve for the predicted class of each image.
pub fn morf_curve(model: &Model, images: &[Tensor], method: &Method, steps: usize) -> Result<Curve> {
    method_curve(model, images, method, Order::MostFirst, steps)
}

/// Least-relevant-first curve for the predicted class of each image.
pub fn lerf_curve(model: &Model, images: &[Tensor], method: &Method, steps: usize) -> Result<Curve> {
    method_curve(model, images, method, Order::LeastFirst, steps)
}

/// Trapezoidal area under the curve, divided by its fraction span so that a
/// flat curve at 1 scores 1.
pub fn auc(curve: &Curve) -> Result<f64> {
    let p = &curve.points;
    if p.len() < 2 {
        return Err(Error::InvalidArgument("area needs at least two points".into()));
    }
    let span = p[p.len() - 1].0 - p[0].0;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument("curve fractions must increase".into()));
    }
    let area: f64 = p.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    Ok(area / span)
}

/// Copy of a raw dataset with the top `fraction` of each image's pixels (by
/// its map, most attributed first) replaced by the channel means of
/// `dataset.stats`.
pub fn remove_pixels(dataset: &Dataset, maps: &[AttributionMap], fraction: f64) -> Result<Dataset> {
    if maps.len() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{} maps for {} images",
            maps.len(),
            dataset.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")));
    }
    let raw = dataset.denormalize();
    let [c, h, w] = raw.image_shape;
    let mut images = raw.images.to_vec();
    let per = c * h * w;
    let count = removal_count(fraction, h * w);
    for (i, map) in maps.iter().enumerate() {
        if map.shape != raw.image_shape {
            return Err(Error::Shape(format!("map {:?} for image {:?}", map.shape, raw.image_shape)));
        }
        let order = removal_order(&map.channel_sum(), Order::MostFirst);
        fill_pixels(&mut images[i * per..(i + 1) * per], c, &order, count, &raw.stats.mean);
    }
    Ok(Dataset {
        images: images.into(),
        ..raw
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoarReport {
    pub method: String,
    /// Test accuracy of a model trained on unmodified data.
    pub baseline_accuracy: f64,
    /// `(fraction, test accuracy after retraining on modified data)`
    pub rows: Vec<(f64, f64)>,
}

/// Accuracy of a model trained from scratch on `train` and tested on `test`.
pub fn train_and_test(train_set: &Dataset, test_set: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<f64> {
    let params = train(spec, train_set, cfg)?;
    let model = Model::new(spec.clone(), params, train_set.stats.clone())?;
    accuracy(&model, test_set)
}

/// Test accuracies after removing each fraction of the most attributed
/// pixels from both splits (replaced by the channel mean) and retraining
/// from scratch with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn roar_rows(
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_maps: &[AttributionMap],
    test_maps: &[AttributionMap],
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let test_set = test_set.clone().with_stats(train_set.stats.clone());
    fractions
        .iter()
        .map(|&f| {
            let tr = remove_pixels(train_set, train_maps, f)?;
            let te = remove_pixels(&test_set, test_maps, f)?;
            Ok((f, train_and_test(&tr, &te, spec, cfg)?))
        })
        .collect()
}

/// Remove-and-retrain report of one method, including the accuracy of the
/// same training run on unmodified data.
#[allow(clippy::too_many_arguments)]
pub fn roar(
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    method: &str,
    train_maps: &[AttributionMap],
    test_maps: &[AttributionMap],
    fractions: &[f64],
) -> Result<RoarReport> {
    let clean_test = test_set.clone().with_stats(train_set.stats.clone());
    Ok(RoarReport {
        method: method.to_string(),
        baseline_accuracy: train_and_test(train_set, &clean_test, spec, cfg)?,
        rows: roar_rows(train_set, test_set, spec, cfg, train_maps, test_maps, fractions)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, shape: [usize; 3]) -> AttributionMap {
        AttributionMap::new(values, shape, "test", 0).unwrap()
    }

    #[test]
    fn removal_counts() {
        assert_eq!(removal_count(0.0, 784), 0);
        assert_eq!(removal_count(0.05, 784), 40);
        assert_eq!(removal_count(2.0 / 9.0, 9), 2);
        assert_eq!(removal_count(1.0, 9), 9);
        assert_eq!(removal_count(0.35, 20), 7);
    }

    #[test]
    fn top_two_of_three_by_three() {
        let img = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let m = map(vec![0.1, 0.9, 0.3, -0.4, 0.5, 0.8, 0.2, 0.0, -0.7], [1, 3, 3]);
        let out = perturb_topk(&img, &m, 2.0 / 9.0, Order::MostFirst, &[0.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 3.0, 4.0, 5.0, 0.0, 7.0, 8.0, 9.0]);
        let out = perturb_topk(&img, &m, 2.0 / 9.0, Order::LeastFirst, &[0.0]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 0.0, 5.0, 6.0, 7.0, 8.0, 0.0]);
    }

    #[test]
    fn extreme_fractions_and_ties() {
        let img = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let flat = map(vec![0.0; 8], [2, 2, 2]);
        let same = perturb_topk(&img, &flat, 0.0, Order::MostFirst, &[9.0, 9.0]).unwrap();
        assert_eq!(same.data(), img.data());
        let all = perturb_topk(&img, &flat, 1.0, Order::LeastFirst, &[-1.0, -2.0]).unwrap();
        assert_eq!(all.data(), &[-1.0, -1.0, -1.0, -1.0, -2.0, -2.0, -2.0, -2.0]);
        let half = perturb_topk(&img, &flat, 0.5, Order::MostFirst, &[0.0, 0.0]).unwrap();
        assert_eq!(half.data(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 7.0, 8.0]);
        assert!(perturb_topk(&img, &flat, 1.5, Order::MostFirst, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn auc_reference_shapes() {
        let flat = Curve {
            points: curve_fractions(20).into_iter().map(|f| (f, 1.0)).collect(),
            n_samples: 1,
            skipped: 0,
        };
        assert!((auc(&flat).unwrap() - 1.0).abs() < 1e-15);
        let drop = Curve {
            points: curve_fractions(20).into_iter().map(|f| (f, 1.0 - f / CURVE_SPAN)).collect(),
            n_samples: 1,
            skipped: 0,
        };
        assert!((auc(&drop).unwrap() - 0.5).abs() < 1e-12);
        let single = Curve {
            points: vec![(0.0, 1.0)],
            n_samples: 1,
            skipped: 0,
        };
        assert!(auc(&single).is_err());
    }

    #[test]
    fn aggregate_skips_missing_rows() {
        let f = [0.0, 0.05];
        let c = aggregate(&f, &[Some(vec![1.0, 0.5]), None, Some(vec![1.0, 0.0])]).unwrap();
        assert_eq!(c.points, vec![(0.0, 1.0), (0.05, 0.25)]);
        assert_eq!((c.n_samples, c.skipped), (2, 1));
        assert!(aggregate(&f, &[None]).is_err());
    }
}
