//! Linear probe, accuracy and analysis reports.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, derive_seed, AugmentationPolicy, Image};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{classifier_forward, Linear, Mode, Network, ParamStore};
use crate::schedule::sgd_update;
use crate::tensor::{kernels, Tape, Tensor};

/// Rows per forward pass when embedding a dataset.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    /// Pad-4 random crop and flip on the training split. Synthetic data is
    /// never augmented.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 30.0,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![18, 24],
            decay: 0.1,
            batch_size: 256,
            augment: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe needs epochs >= 1 and batch_size >= 1".into()));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(Error::Config(format!("probe milestone {m} is not before epoch {}", self.epochs)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("probe lr must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Fraction of rows whose first maximal logit sits at the label.
pub fn top1_accuracy(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2("top1_accuracy")?;
    if c < 2 {
        return Err(Error::invalid(format!("top1 needs at least 2 classes, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch { op: "top1_accuracy", left: vec![n, c], right: vec![labels.len()] });
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let mut best = 0;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        hits += (best == y) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Eval-mode encoder features (`N x F`, no gradients).
pub fn encode_features(net: &Network, store: &ParamStore, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    embed(net, store, images, false)
}

/// Eval-mode unit-norm projector outputs (`N x D`).
pub fn project_embeddings(net: &Network, store: &ParamStore, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    embed(net, store, images, true)
}

fn embed(net: &Network, store: &ParamStore, images: &Tensor<f32>, projected: bool) -> Result<Tensor<f32>> {
    let (n, ..) = images.dims4("embed")?;
    let mut out = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut tape = Tape::<f32>::new();
        let params = net.bind(&mut tape, store, false);
        let x = tape.constant(images.gather_rows(&idx)?);
        let v = if projected {
            net.forward(&mut tape, &params, &store.buffers, x, Mode::Eval)?.z
        } else {
            net.encode(&mut tape, &params, &store.buffers, x, Mode::Eval)?.0
        };
        width = tape.value(v).shape()[1];
        out.extend_from_slice(tape.value(v).data());
    }
    Tensor::from_vec(vec![n, width], out)
}

/// Zero-pad by 4 pixels, take a random crop of the original size, flip with p 0.5.
fn pad_crop_flip(img: &Image, rng: &mut impl Rng) -> Image {
    const PAD: usize = 4;
    let (c, h, w) = (img.channels, img.height, img.width);
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen::<f64>() < 0.5;
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y + dy;
            if sy < PAD || sy >= h + PAD {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < PAD || sx >= w + PAD {
                    continue;
                }
                let tx = if flip { w - 1 - x } else { x };
                data[(ch * h + y) * w + tx] = img.data[(ch * h + sy - PAD) * w + sx - PAD];
            }
        }
    }
    Image { channels: c, height: h, width: w, data }
}

fn augmented_copy(images: &Tensor<f32>, seed: u64, epoch: u64) -> Result<Tensor<f32>> {
    let (n, c, h, w) = images.dims4("probe_augment")?;
    let per = c * h * w;
    let mut data = Vec::with_capacity(images.len());
    for i in 0..n {
        let img = Image { channels: c, height: h, width: w, data: images.row(i).to_vec() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, i as u64, 2));
        data.extend_from_slice(&pad_crop_flip(&img, &mut rng).data);
    }
    debug_assert_eq!(data.len(), n * per);
    Tensor::from_vec(vec![n, c, h, w], data)
}

/// Softmax-regression training of a linear head with step-decayed SGD.
/// `features(epoch)` supplies the training features of each epoch.
pub fn fit_linear(
    mut features: impl FnMut(usize) -> Result<Tensor<f32>>,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<Linear> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Dataset("probe training split is empty".into()));
    }
    let mut head: Option<Linear> = None;
    let mut vel_w = Vec::new();
    let mut vel_b = vec![0.0f32; classes];
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        let feats = features(epoch)?;
        let (n, f) = feats.dims2("fit_linear")?;
        if n != labels.len() {
            return Err(Error::ShapeMismatch { op: "fit_linear", left: vec![n, f], right: vec![labels.len()] });
        }
        let head = head.get_or_insert_with(|| {
            vel_w = vec![0.0f32; f * classes];
            Linear::zeros(f, classes)
        });
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0, 3)));
        for chunk in order.chunks(cfg.batch_size) {
            let x = feats.gather_rows(chunk)?;
            let mut onehot = vec![0.0f32; chunk.len() * classes];
            for (r, &i) in chunk.iter().enumerate() {
                onehot[r * classes + labels[i]] = 1.0;
            }
            let mut tape = Tape::<f32>::new();
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let xv = tape.constant(x);
            let logits = classifier_forward(&mut tape, w, b, xv)?;
            let p = tape.softmax_rows(logits, 1.0, None)?;
            let t = tape.constant(Tensor::from_vec(vec![chunk.len(), classes], onehot)?);
            let loss = tape.cross_entropy_rows(t, p, 1e-12)?;
            tape.backward(loss)?;
            let gw = tape.grad(w).expect("param grad").to_vec();
            let gb = tape.grad(b).expect("param grad").to_vec();
            sgd_update(head.weight.data_mut(), &gw, &mut vel_w, lr, cfg.momentum, cfg.weight_decay)?;
            sgd_update(head.bias.data_mut(), &gb, &mut vel_b, lr, cfg.momentum, 0.0)?;
        }
    }
    head.ok_or_else(|| Error::invalid("probe ran no epochs"))
}

pub fn linear_logits(head: &Linear, features: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, f) = features.dims2("linear_logits")?;
    let (f2, c) = head.weight.dims2("linear_logits")?;
    if f != f2 {
        return Err(Error::ShapeMismatch { op: "linear_logits", left: vec![n, f], right: vec![f2, c] });
    }
    let mut out = vec![0.0f32; n * c];
    for i in 0..n {
        out[i * c..(i + 1) * c].copy_from_slice(head.bias.data());
    }
    kernels::gemm(n, f, c, features.data(), false, head.weight.data(), false, 1.0, &mut out);
    Tensor::from_vec(vec![n, c], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub epochs: usize,
}

/// Trains a linear head on frozen encoder features and scores it on `test`.
pub fn linear_probe_train(
    net: &Network,
    store: &ParamStore,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<(Linear, ProbeResult)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("probe needs non-empty train and test splits".into()));
    }
    let (train_labels, test_labels) = (train.labels()?, test.labels()?);
    let augment = cfg.augment && train.name != "blobs";
    let plain = encode_features(net, store, &train.images)?;
    let head = fit_linear(
        |epoch| {
            if augment {
                encode_features(net, store, &augmented_copy(&train.images, cfg.seed, epoch as u64)?)
            } else {
                Ok(plain.clone())
            }
        },
        train_labels,
        train.classes,
        cfg,
    )?;
    let test_feats = encode_features(net, store, &test.images)?;
    let result = ProbeResult {
        train_accuracy: top1_accuracy(&linear_logits(&head, &plain)?, train_labels)?,
        test_accuracy: top1_accuracy(&linear_logits(&head, &test_feats)?, test_labels)?,
        train_samples: train.len(),
        test_samples: test.len(),
        classes: train.classes,
        epochs: cfg.epochs,
    };
    Ok((head, result))
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub samples: usize,
    pub seed: u64,
    pub weak_similarities: Vec<f64>,
    pub strong_similarities: Vec<f64>,
    /// `HISTOGRAM_BINS + 1` edges spanning `[-1, 1]`.
    pub bin_edges: Vec<f64>,
    pub weak_counts: Vec<usize>,
    pub strong_counts: Vec<usize>,
    pub weak_mean: f64,
    pub strong_mean: f64,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// Cosine similarity between the projection of each original image and
/// the projections of a weak and a strong augmentation of it.
pub fn similarity_shift_histogram(
    net: &Network,
    store: &ParamStore,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
    weak: &AugmentationPolicy,
    strong: &AugmentationPolicy,
) -> Result<SimilarityReport> {
    if data.is_empty() || n_samples == 0 {
        return Err(Error::Dataset("similarity report needs samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = Vec::with_capacity(n_samples);
    while idx.len() < n_samples {
        let mut all: Vec<usize> = (0..data.len()).collect();
        all.shuffle(&mut rng);
        idx.extend(all.into_iter().take(n_samples - idx.len()));
    }
    let originals = data.images.gather_rows(&idx)?;
    let z0 = project_embeddings(net, store, &originals)?;
    let cosines = |policy: &AugmentationPolicy, view: u64| -> Result<Vec<f64>> {
        // Repeated indices still draw distinct augmentations via their position.
        let mut views = Vec::with_capacity(originals.len());
        for (pos, &i) in idx.iter().enumerate() {
            let one = apply_policy(policy, &data.images, &[i], seed, pos as u64, view)?;
            views.extend_from_slice(one.data());
        }
        let views = Tensor::from_vec(originals.shape().to_vec(), views)?;
        let z = project_embeddings(net, store, &views)?;
        Ok((0..idx.len()).map(|r| kernels::dot(z0.row(r), z.row(r)).clamp(-1.0, 1.0)).collect())
    };
    let w = cosines(weak, 0)?;
    let s = cosines(strong, 1)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SimilarityReport {
        samples: n_samples,
        seed,
        bin_edges: (0..=HISTOGRAM_BINS).map(|b| -1.0 + 2.0 * b as f64 / HISTOGRAM_BINS as f64).collect(),
        weak_counts: histogram(&w, HISTOGRAM_BINS),
        strong_counts: histogram(&s, HISTOGRAM_BINS),
        weak_mean: mean(&w),
        strong_mean: mean(&s),
        weak_similarities: w,
        strong_similarities: s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpeningTable {
    /// `(tau, exp(1 / tau))`.
    pub temperature: Vec<(f64, f64)>,
    /// `(x, exp(x / 0.05))` for `x = 0, 0.1, ..., 1`.
    pub similarity: Vec<(f64, f64)>,
}

pub fn sharpening_curve(taus: &[f64]) -> Result<SharpeningTable> {
    if let Some(&t) = taus.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(SharpeningTable {
        temperature: taus.iter().map(|&t| (t, (1.0 / t).exp())).collect(),
        similarity: (0..=10).map(|i| i as f64 / 10.0).map(|x| (x, (x / 0.05).exp())).collect(),
    })
}

/// `-sum p log p` per row, with `0 log 0 = 0`.
pub fn distribution_entropy(p: &Tensor<f32>) -> Result<Vec<f64>> {
    let (n, _) = p.dims2("distribution_entropy")?;
    if let Some(v) = p.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid(format!("probabilities must be nonnegative, got {v}")));
    }
    Ok((0..n)
        .map(|i| p.row(i).iter().filter(|&&v| v > 0.0).map(|&v| -(v as f64) * (v as f64).ln()).sum())
        .collect())
}
