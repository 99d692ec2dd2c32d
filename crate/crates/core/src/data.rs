//! Dataset loading (MNIST IDX, optional CIFAR-10 binary), a synthetic shape
//! dataset, normalization and splitting.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use aprop_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel input statistics; the model sees `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes one CHW image in place.
    pub fn apply(&self, image: &mut [f64]) {
        let plane = image.len() / self.channels().max(1);
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert(&self, image: &mut [f64]) {
        let plane = image.len() / self.channels().max(1);
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = *v * s + m;
            }
        }
    }
}

/// N×C×H×W images with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Arc<[f64]>,
    pub labels: Vec<usize>,
    /// C, H, W
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    /// Statistics of the training split this dataset belongs to.
    pub stats: Normalization,
    pub split: Split,
    /// Whether `images` already hold normalized values.
    pub normalized: bool,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        image_shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} values for {} images of shape {:?}",
                images.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        let stats = channel_stats(&images, image_shape);
        Ok(Dataset {
            images: images.into(),
            labels,
            image_shape,
            num_classes,
            stats,
            split,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Image `index` as a C×H×W tensor, normalized with `self.stats` unless
    /// the dataset already is.
    pub fn model_input(&self, index: usize) -> Tensor {
        let mut v = self.image(index).to_vec();
        if !self.normalized {
            self.stats.apply(&mut v);
        }
        Tensor::new(&self.image_shape, v).expect("image length matches shape")
    }

    /// Replaces the statistics, e.g. to give a test split its train split's stats.
    pub fn with_stats(mut self, stats: Normalization) -> Self {
        self.stats = stats;
        self
    }

    /// `(x - mean) / std` per channel using `self.stats`.
    pub fn normalize(&self) -> Result<Dataset> {
        if self.normalized {
            return Ok(self.clone());
        }
        if let Some(c) = self.stats.std.iter().position(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "channel {c} has zero standard deviation"
            )));
        }
        let mut images = self.images.to_vec();
        for chunk in images.chunks_mut(self.image_len()) {
            self.stats.apply(chunk);
        }
        Ok(Dataset {
            images: images.into(),
            normalized: true,
            ..self.clone()
        })
    }

    pub fn denormalize(&self) -> Dataset {
        if !self.normalized {
            return self.clone();
        }
        let mut images = self.images.to_vec();
        for chunk in images.chunks_mut(self.image_len()) {
            self.stats.invert(chunk);
        }
        Dataset {
            images: images.into(),
            normalized: false,
            ..self.clone()
        }
    }

    /// Copy restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images: images.into(),
            labels,
            ..self.clone()
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded random partition into two parts of sizes `round(f.0·N)` and
    /// `round(f.1·N)` (capped by what remains).
    pub fn split(&self, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
        let (a, b) = fractions;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} must be in [0,1] and sum to at most 1"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let first = ((a * n as f64).round() as usize).min(n);
        let second = ((b * n as f64).round() as usize).min(n - first);
        let mut left = self.subset(&order[..first]);
        let mut right = self.subset(&order[first..first + second]);
        left.split = Split::Train;
        right.split = Split::Test;
        Ok((left, right))
    }

    /// Recomputes `stats` from this dataset's own (raw) pixels.
    pub fn recompute_stats(mut self) -> Self {
        let raw = self.denormalize();
        self.stats = channel_stats(&raw.images, self.image_shape);
        self
    }
}

fn channel_stats(images: &[f64], shape: [usize; 3]) -> Normalization {
    let [c, h, w] = shape;
    let plane = h * w;
    let per = c * plane;
    let n = if per == 0 { 0 } else { images.len() / per };
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    if count == 0.0 {
        return Normalization { mean, std };
    }
    for img in images.chunks(per) {
        for (ch, p) in img.chunks(plane).enumerate() {
            mean[ch] += p.iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for img in images.chunks(per) {
        for (ch, p) in img.chunks(plane).enumerate() {
            std[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    for s in &mut std {
        *s = (*s / count).sqrt();
    }
    Normalization { mean, std }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

/// Parses an IDX image file: returns (rows, cols, pixels scaled to [0,1]).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("IDX images", format!("magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, "IDX images")? as usize;
    let rows = read_u32_be(bytes, 8, "IDX images")? as usize;
    let cols = read_u32_be(bytes, 12, "IDX images")? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::format(
            "IDX images",
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let pixels = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("IDX labels", format!("magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, "IDX labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            "IDX labels",
            format!("payload has {} bytes, expected {n}", payload.len()),
        ));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label file pair (MNIST layout, 10 classes).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    let per = rows * cols;
    if per == 0 || pixels.len() / per != labels.len() {
        return Err(Error::format(
            "IDX pair",
            format!(
                "{} images but {} labels",
                if per == 0 { 0 } else { pixels.len() / per },
                labels.len()
            ),
        ));
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(pixels, labels, [1, rows, cols], classes, Split::Train)
}

/// Loads the standard four MNIST files from `dir`. The test split carries the
/// train split's statistics.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?
    .with_stats(train.stats.clone());
    test.split = Split::Test;
    Ok((train, test))
}

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 channel-major RGB bytes.
#[cfg(feature = "cifar")]
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    const RECORD: usize = 3073;
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(
            "CIFAR-10 batch",
            format!("{} bytes is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks(RECORD) {
        if rec[0] > 9 {
            return Err(Error::format("CIFAR-10 batch", format!("label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((images, labels))
}

#[cfg(feature = "cifar")]
pub fn load_cifar(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (i, l) = parse_cifar(&read_file(p.as_ref())?)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(images, labels, [3, 32, 32], 10, Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Square,
    Cross,
    Disk,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Cross, ShapeClass::Disk];
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub image_side: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 8000,
            image_side: 28,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

fn stamp(class: ShapeClass, img: &mut [f64], side: usize, size: usize, top: usize, left: usize) {
    let half = size as f64 / 2.0;
    let (cy, cx) = (top as f64 + half - 0.5, left as f64 + half - 0.5);
    let bar = (size / 5).max(1);
    for y in top..top + size {
        for x in left..left + size {
            let inside = match class {
                ShapeClass::Square => {
                    let (dy, dx) = (y - top, x - left);
                    dy < bar || dx < bar || dy >= size - bar || dx >= size - bar
                }
                ShapeClass::Cross => {
                    let lo = (size - bar) / 2;
                    let (dy, dx) = (y - top, x - left);
                    (dy >= lo && dy < lo + bar) || (dx >= lo && dx < lo + bar)
                }
                ShapeClass::Disk => {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    dy * dy + dx * dx <= half * half
                }
            };
            if inside {
                img[y * side + x] = 1.0;
            }
        }
    }
}

/// Three-class single-channel dataset (square outline, cross, filled disk)
/// stamped at random positions with additive Gaussian noise, clamped to [0,1].
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.image_side < 8 {
        return Err(Error::InvalidArgument(format!(
            "image_side {} must be at least 8",
            cfg.image_side
        )));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
    }
    let side = cfg.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Vec::with_capacity(cfg.n_samples * side * side);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let label = rng.gen_range(0..3);
        let size = rng.gen_range(side * 3 / 8..=side / 2 + 2).min(side);
        let top = rng.gen_range(0..=side - size);
        let left = rng.gen_range(0..=side - size);
        let mut img = vec![0.0; side * side];
        stamp(ShapeClass::ALL[label], &mut img, side, size, top, left);
        if cfg.noise_std > 0.0 {
            for v in &mut img {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.extend(img);
        labels.push(label);
    }
    Dataset::new(images, labels, [1, side, side], 3, Split::Train)
}
