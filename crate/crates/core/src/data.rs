//! Datasets: CIFAR binary records and a synthetic colored-square generator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images in `[0, 1]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`.
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, classes: usize, name: impl Into<String>) -> Result<Self> {
        let (n, ..) = images.dims4("dataset")?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dataset(format!("{} labels for {n} images", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Dataset(format!("label {bad} outside [0, {classes})")));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, classes, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Dataset(format!("dataset {} has no labels", self.name)))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.gather_rows(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self { images, labels, classes: self.classes, name: self.name.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    /// 1 label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decodes CIFAR binary records: label byte(s), then the R, G and B planes
/// row-major.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Dataset(format!(
            "truncated CIFAR data: {} bytes is not a positive multiple of {rec}",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let skip = rec - CIFAR_PIXELS;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[skip - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Dataset(format!("record {i} has label {label}, expected < {}", variant.classes())));
        }
        labels.push(label);
        pixels.extend(r[skip..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::from_vec(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        Some(labels),
        variant.classes(),
        format!("{variant:?}").to_lowercase(),
    )
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parameters of [`gen_synthetic_blobs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self { classes: 4, per_class: 500, image_size: 32, noise_sigma: 0.1, seed: 0 }
    }
}

/// Fully saturated color at hue `h` (turns).
fn hue_rgb(h: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = (1.0 - ((h6 % 2.0) - 1.0).abs()) as f32;
    match h6 as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Class template: a centered square of hue `class / classes` covering half
/// the side, on a mid-gray background.
pub fn blob_template(class: usize, classes: usize, size: usize) -> Vec<f32> {
    let color = hue_rgb(class as f64 / classes as f64);
    let (lo, hi) = (size / 4, size - size / 4);
    let mut out = vec![0.5f32; 3 * size * size];
    for (c, &v) in color.iter().enumerate() {
        for y in lo..hi {
            for x in lo..hi {
                out[(c * size + y) * size + x] = v;
            }
        }
    }
    out
}

/// Class templates plus Gaussian pixel noise, clamped to `[0, 1]`. Samples
/// are grouped by class.
pub fn gen_synthetic_blobs(cfg: &BlobsConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.per_class == 0 || cfg.image_size < 4 || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Dataset("blobs need per_class >= 1, image_size >= 4, noise_sigma >= 0".into()));
    }
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("nonnegative sigma");
    let n = cfg.classes * cfg.per_class;
    let mut images = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for class in 0..cfg.classes {
        let template = blob_template(class, cfg.classes, s);
        for _ in 0..cfg.per_class {
            images.extend(template.iter().map(|&t| (t + noise.sample(&mut rng) as f32).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::from_vec(vec![n, 3, s, s], images)?, Some(labels), cfg.classes, "blobs")
}
