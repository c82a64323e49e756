//! Convolutional encoder, MLP projector and linear classifier.
//!
//! Parameters live in a [`ParamStore`] as named `f32` tensors. Forward passes
//! take the parameters as tape variables so the same code runs at `f32` for
//! training and at `f64` for finite-difference checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3x3 stride-1 first convolution for small images.
    Conv3x3,
    /// 7x7 stride-2 first convolution.
    Conv7x7,
}

impl Stem {
    fn geometry(self) -> (usize, usize, usize) {
        match self {
            Stem::Conv3x3 => (3, 1, 1),
            Stem::Conv7x7 => (7, 2, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub channels: usize,
    pub image_size: usize,
    pub stem: Stem,
    /// Output channels of each conv -> batch norm -> relu -> 2x2 avg-pool block.
    pub widths: Vec<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 32,
            stem: Stem::Conv3x3,
            widths: vec![32, 64, 128],
        }
    }
}

impl EncoderSpec {
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder needs positive channels and widths".into()));
        }
        let mut side = self.image_size;
        for b in 0..self.widths.len() {
            let (k, stride, pad) = if b == 0 { self.stem.geometry() } else { (3, 1, 1) };
            if side + 2 * pad < k {
                return Err(Error::Config(format!("image size {} too small for the encoder", self.image_size)));
            }
            side = (side + 2 * pad - k) / stride + 1;
            if side < 2 {
                return Err(Error::Config(format!("image size {} too small for the encoder", self.image_size)));
            }
            side /= 2;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Batch norm after every hidden layer.
    pub batch_norm: bool,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            hidden: vec![512],
            output: 256,
            batch_norm: true,
        }
    }
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.output == 0 {
            return Err(Error::Config("projector needs at least one hidden layer and positive dims".into()));
        }
        Ok(())
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorList {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl TensorList {
    pub fn push(&mut self, name: String, t: Tensor<f32>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Order-sensitive FNV-1a hash of every bit, for cheap equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: TensorList,
    pub buffers: TensorList,
}

impl ParamStore {
    /// Folds batch statistics from a train-mode forward into the running buffers.
    pub fn commit_bn(&mut self, stats: &[BnStats], momentum: f64) {
        for (l, s) in stats.iter().enumerate() {
            for (buf, batch) in [(2 * l, &s.mean), (2 * l + 1, &s.var)] {
                for (r, &b) in self.buffers.tensors[buf].data_mut().iter_mut().zip(batch) {
                    *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
                }
            }
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.same_layout(&other.params) && self.buffers.same_layout(&other.buffers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the batch-norm statistics are returned for committing.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Forward {
    pub features: Var,
    /// Unit-norm projector output.
    pub z: Var,
    /// One entry per batch-norm layer, in buffer order (train mode only).
    pub bn_stats: Vec<BnStats>,
}

/// Encoder followed by a projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
}

struct Cursor<'a> {
    params: &'a [Var],
    next: usize,
    bn: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Result<Var> {
        let v = self
            .params
            .get(self.next)
            .copied()
            .ok_or_else(|| Error::invalid("parameter list shorter than the network layout"))?;
        self.next += 1;
        Ok(v)
    }
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::raw(shape, (0..n).map(|_| dist.sample(rng) as f32).collect())
}

impl Network {
    pub fn new(encoder: EncoderSpec, projector: ProjectorSpec) -> Result<Self> {
        encoder.validate()?;
        projector.validate()?;
        Ok(Self { encoder, projector })
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector.output
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.encoder.channels;
        for (b, &w) in self.encoder.widths.iter().enumerate() {
            let k = if b == 0 { self.encoder.stem.geometry().0 } else { 3 };
            total += w * c_in * k * k + 2 * w;
            c_in = w;
        }
        let mut d_in = self.encoder.feature_dim();
        for &h in &self.projector.hidden {
            total += d_in * h + if self.projector.batch_norm { 2 * h } else { h };
            d_in = h;
        }
        total + d_in * self.projector.output + self.projector.output
    }

    /// Deterministic He-normal initialization; batch norm starts at
    /// `gamma = 1, beta = 0` with unit running variance.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let bn = |store: &mut ParamStore, prefix: &str, c: usize| {
            store.params.push(format!("{prefix}.bn.gamma"), Tensor::full(vec![c], 1.0));
            store.params.push(format!("{prefix}.bn.beta"), Tensor::zeros(vec![c]));
            store.buffers.push(format!("{prefix}.bn.running_mean"), Tensor::zeros(vec![c]));
            store.buffers.push(format!("{prefix}.bn.running_var"), Tensor::full(vec![c], 1.0));
        };
        let mut c_in = self.encoder.channels;
        for (b, &w) in self.encoder.widths.iter().enumerate() {
            let k = if b == 0 { self.encoder.stem.geometry().0 } else { 3 };
            let prefix = format!("encoder.block{b}");
            store.params.push(format!("{prefix}.conv.weight"), he_normal(vec![w, c_in, k, k], c_in * k * k, &mut rng));
            bn(&mut store, &prefix, w);
            c_in = w;
        }
        let mut d_in = self.encoder.feature_dim();
        for (j, &h) in self.projector.hidden.iter().enumerate() {
            let prefix = format!("projector.fc{j}");
            store.params.push(format!("{prefix}.weight"), he_normal(vec![d_in, h], d_in, &mut rng));
            if self.projector.batch_norm {
                bn(&mut store, &prefix, h);
            } else {
                store.params.push(format!("{prefix}.bias"), Tensor::zeros(vec![h]));
            }
            d_in = h;
        }
        let j = self.projector.hidden.len();
        let out = self.projector.output;
        store.params.push(format!("projector.fc{j}.weight"), he_normal(vec![d_in, out], d_in, &mut rng));
        store.params.push(format!("projector.fc{j}.bias"), Tensor::zeros(vec![out]));
        store
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, trainable: bool) -> Vec<Var> {
        store
            .params
            .tensors
            .iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    fn batch_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        cur: &mut Cursor<'_>,
        buffers: &TensorList,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BnStats>,
    ) -> Result<Var> {
        let (gamma, beta) = (cur.take()?, cur.take()?);
        let l = cur.bn;
        cur.bn += 1;
        let out = match mode {
            Mode::Train => {
                let o = tape.batch_norm(x, gamma, beta, BatchNormMode::Train, BN_EPS)?;
                stats.push(BnStats { mean: o.batch_mean, var: o.batch_var });
                o.out
            }
            Mode::Eval => {
                let buf = |i: usize| -> Result<Vec<T>> {
                    buffers
                        .tensors
                        .get(i)
                        .map(|t| t.data().iter().map(|&v| T::of(v as f64)).collect())
                        .ok_or_else(|| Error::invalid("missing batch-norm running statistics"))
                };
                let (mean, var) = (buf(2 * l)?, buf(2 * l + 1)?);
                tape.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var }, BN_EPS)?.out
            }
        };
        Ok(out)
    }

    /// Encoder then projector: `N x C x H x W` images to unit-norm `N x D` embeddings.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        buffers: &TensorList,
        images: Var,
        mode: Mode,
    ) -> Result<Forward> {
        let mut cur = Cursor { params, next: 0, bn: 0 };
        let mut stats = Vec::new();
        let features = self.encode_with(tape, &mut cur, buffers, images, mode, &mut stats)?;
        let mut h = features;
        for _ in &self.projector.hidden {
            let w = cur.take()?;
            h = tape.matmul(h, w)?;
            if self.projector.batch_norm {
                h = self.batch_norm(tape, &mut cur, buffers, h, mode, &mut stats)?;
            } else {
                let b = cur.take()?;
                h = tape.add_row_bias(h, b)?;
            }
            h = tape.relu(h);
        }
        let (w, b) = (cur.take()?, cur.take()?);
        let out = tape.matmul(h, w)?;
        let out = tape.add_row_bias(out, b)?;
        let z = tape.l2_normalize_rows(out, NORM_EPS)?;
        Ok(Forward { features, z, bn_stats: stats })
    }

    /// Encoder only: `N x C x H x W` to `N x F` features.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        buffers: &TensorList,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BnStats>)> {
        let mut cur = Cursor { params, next: 0, bn: 0 };
        let mut stats = Vec::new();
        let f = self.encode_with(tape, &mut cur, buffers, images, mode, &mut stats)?;
        Ok((f, stats))
    }

    fn encode_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        cur: &mut Cursor<'_>,
        buffers: &TensorList,
        images: Var,
        mode: Mode,
        stats: &mut Vec<BnStats>,
    ) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        let s = self.encoder.image_size;
        if shape.len() != 4 || shape[1..] != [self.encoder.channels, s, s] {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                left: shape,
                right: vec![0, self.encoder.channels, s, s],
            });
        }
        let mut h = images;
        for b in 0..self.encoder.widths.len() {
            let (_, stride, pad) = if b == 0 { self.encoder.stem.geometry() } else { (3, 1, 1) };
            let w = cur.take()?;
            h = tape.conv2d(h, w, stride, pad)?;
            h = self.batch_norm(tape, cur, buffers, h, mode, stats)?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        tape.global_avg_pool(h)
    }
}

/// Affine classifier `x W + b` on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `F x C`.
    pub weight: Tensor<f32>,
    /// `C`.
    pub bias: Tensor<f32>,
}

impl Linear {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![features, classes]),
            bias: Tensor::zeros(vec![classes]),
        }
    }
}

pub fn classifier_forward<T: Scalar>(tape: &mut Tape<T>, weight: Var, bias: Var, features: Var) -> Result<Var> {
    let logits = tape.matmul(features, weight)?;
    tape.add_row_bias(logits, bias)
}
