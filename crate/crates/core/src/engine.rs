//! Online/target training machinery: FIFO embedding queue, EMA updates and
//! the per-step and per-run training loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_policy, derive_seed};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{EmaSchedule, QueueWarmup, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{Header, MetricsWriter, StepMetrics};
use crate::models::{Mode, Network, ParamStore, BN_MOMENTUM};
use crate::objectives::{evaluate_objective, LossTerms, ObjectiveConfig, ObjectiveKind};
use crate::par;
use crate::schedule::{lr_at, momentum_at, ScheduleConfig, Sgd};
use crate::tensor::{grad_check, kernels, GradCheckConfig, GradCheckReport, GradFn, Tape, Tensor};

/// Stored rows must be unit-norm within this tolerance.
const UNIT_TOL: f64 = 1e-3;
/// Epoch tag of the views used to seed the queue before training.
const PRIMING_EPOCH: u64 = u64::MAX;
const STRONG_VIEW: u64 = 0;
const WEAK_VIEW: u64 = 1;

/// Fixed-capacity ring buffer of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Queue("capacity and dim must be positive".into()));
        }
        Ok(Self { capacity, dim, storage: vec![0.0; capacity * dim], cursor: 0, fill: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity
    }

    /// Writes the rows at the cursor, evicting the oldest once full.
    pub fn push(&mut self, batch: &Tensor<f32>) -> Result<()> {
        let (n, d) = batch.dims2("queue_push")?;
        if d != self.dim {
            return Err(Error::Queue(format!("row dim {d} does not match queue dim {}", self.dim)));
        }
        if n > self.capacity {
            return Err(Error::Queue(format!("batch of {n} rows exceeds capacity {}", self.capacity)));
        }
        for i in 0..n {
            let norm = kernels::norm(batch.row(i));
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Queue(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        for i in 0..n {
            let at = self.cursor * d;
            self.storage[at..at + d].copy_from_slice(batch.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.fill = (self.fill + n).min(self.capacity);
        Ok(())
    }

    /// Copy of the stored rows, oldest first.
    pub fn snapshot(&self) -> Result<Tensor<f32>> {
        if self.fill == 0 {
            return Err(Error::Queue("snapshot of an empty queue".into()));
        }
        let d = self.dim;
        let data = if self.fill < self.capacity {
            self.storage[..self.fill * d].to_vec()
        } else {
            let mut v = self.storage[self.cursor * d..].to_vec();
            v.extend_from_slice(&self.storage[..self.cursor * d]);
            v
        };
        Tensor::from_vec(vec![self.fill, d], data)
    }

    fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.put_tensor("queue/storage", &Tensor::raw(vec![self.capacity, self.dim], self.storage.clone()));
        ckpt.put_u64s("queue/state", vec![self.capacity as u64, self.dim as u64, self.cursor as u64, self.fill as u64]);
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let s = ckpt.u64s("queue/state")?;
        let [capacity, dim, cursor, fill] = <[u64; 4]>::try_from(s)
            .map_err(|_| Error::Checkpoint("queue/state must hold 4 values".into()))?
            .map(|v| v as usize);
        let storage = ckpt.tensor("queue/storage")?;
        if storage.shape() != [capacity, dim] || cursor >= capacity || fill > capacity {
            return Err(Error::Checkpoint("inconsistent queue state".into()));
        }
        Ok(Self { capacity, dim, storage: storage.data().to_vec(), cursor, fill })
    }
}

/// `target <- m target + (1 - m) online` for every parameter and buffer.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    if !target.same_layout(online) {
        return Err(Error::invalid("online and target parameter layouts differ"));
    }
    let (a, b) = (m as f32, (1.0 - m) as f32);
    let pairs = target
        .params
        .tensors
        .iter_mut()
        .zip(&online.params.tensors)
        .chain(target.buffers.tensors.iter_mut().zip(&online.buffers.tensors));
    for (t, o) in pairs {
        for (x, &y) in t.data_mut().iter_mut().zip(o.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub online: ParamStore,
    pub target: ParamStore,
    pub optimizer: Sgd,
    pub queue: MemoryQueue,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl TrainState {
    /// Fresh state; the target starts as an exact copy of the online network.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let network = Network::new(cfg.encoder.clone(), cfg.projector.clone())?;
        let online = network.init(cfg.seed);
        let shapes: Vec<usize> = online.params.tensors.iter().map(|t| t.len()).collect();
        Ok(Self {
            queue: MemoryQueue::new(cfg.queue_size, network.embedding_dim())?,
            optimizer: Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay, &shapes),
            target: online.clone(),
            online,
            network,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.put_bytes("config", config_text.as_bytes().to_vec());
        c.put_u64s("step", vec![self.step]);
        for (prefix, store) in [("online", &self.online), ("target", &self.target)] {
            for (name, t) in store.params.names.iter().zip(&store.params.tensors) {
                c.put_tensor(format!("{prefix}/param/{name}"), t);
            }
            for (name, t) in store.buffers.names.iter().zip(&store.buffers.tensors) {
                c.put_tensor(format!("{prefix}/buffer/{name}"), t);
            }
        }
        for (name, (v, p)) in self.online.params.names.iter().zip(self.optimizer.velocity.iter().zip(&self.online.params.tensors)) {
            c.put_tensor(format!("optim/velocity/{name}"), &Tensor::raw(p.shape().to_vec(), v.clone()));
        }
        self.queue.to_checkpoint(&mut c);
        c
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`] into the layout of `cfg`.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        state.step = *ckpt.u64s("step")?.first().ok_or_else(|| Error::Checkpoint("empty step entry".into()))?;
        for (prefix, store) in [("online", &mut state.online), ("target", &mut state.target)] {
            for (kind, list) in [("param", &mut store.params), ("buffer", &mut store.buffers)] {
                for (name, t) in list.names.iter().zip(list.tensors.iter_mut()) {
                    let saved = ckpt.tensor(&format!("{prefix}/{kind}/{name}"))?;
                    if saved.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("{prefix}/{kind}/{name} has shape {:?}, expected {:?}", saved.shape(), t.shape())));
                    }
                    *t = saved.clone();
                }
            }
        }
        for (name, v) in state.online.params.names.iter().zip(state.optimizer.velocity.iter_mut()) {
            let saved = ckpt.tensor(&format!("optim/velocity/{name}"))?;
            if saved.len() != v.len() {
                return Err(Error::Checkpoint(format!("optimizer slot {name} has the wrong size")));
            }
            v.copy_from_slice(saved.data());
        }
        let queue = MemoryQueue::from_checkpoint(ckpt)?;
        if queue.capacity() != cfg.queue_size || queue.dim() != state.network.embedding_dim() {
            return Err(Error::Checkpoint("queue shape does not match the config".into()));
        }
        state.queue = queue;
        Ok(state)
    }
}

/// Per-step hyperparameters.
#[derive(Clone, Debug)]
pub struct StepConfig<'a> {
    pub objective: &'a ObjectiveConfig,
    pub lr: f64,
    pub ema_m: f64,
}

pub struct StepOutput {
    pub terms: LossTerms,
    /// Queue rows the loss was computed against.
    pub negatives: usize,
    pub z1: Tensor<f32>,
    pub z2: Tensor<f32>,
}

/// Weak views through the target network, gradient-free, batch statistics.
fn target_embed(state: &TrainState, x2: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let tp = state.network.bind(&mut tape, &state.target, false);
    let xv = tape.constant(x2);
    let out = state.network.forward(&mut tape, &tp, &state.target.buffers, xv, Mode::Train)?;
    debug_assert_eq!(tape.node_count(), 0);
    Ok(tape.value(out.z).clone())
}

fn logit_stats(z1: &Tensor<f32>, z2: &Tensor<f32>, queue: &Tensor<f32>) -> String {
    let (n, _) = (z1.shape()[0], z1.shape()[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut nonfinite = 0;
    for i in 0..n {
        let rows = std::iter::once(z2.row(i)).chain((0..queue.shape()[0]).map(|j| queue.row(j)));
        for r in rows {
            let s = kernels::dot(z1.row(i), r);
            if s.is_finite() {
                lo = lo.min(s);
                hi = hi.max(s);
            } else {
                nonfinite += 1;
            }
        }
    }
    format!("similarities in [{lo}, {hi}], {nonfinite} non-finite; z1 finite: {}, z2 finite: {}", z1.all_finite(), z2.all_finite())
}

/// One training step on the samples at `indices`:
/// strong and weak views; online and target embeddings; queue snapshot;
/// loss; backward and SGD on the online network; EMA; enqueue `z2`.
pub fn pretrain_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    data: &Dataset,
    indices: &[usize],
    epoch: u64,
    step_cfg: &StepConfig<'_>,
) -> Result<StepOutput> {
    let x1 = apply_policy(&cfg.augment.strong, &data.images, indices, cfg.seed, epoch, STRONG_VIEW)?;
    let x2 = apply_policy(&cfg.augment.weak, &data.images, indices, cfg.seed, epoch, WEAK_VIEW)?;

    let mut tape = Tape::<f32>::new();
    let params = state.network.bind(&mut tape, &state.online, true);
    let xv = tape.constant(x1);
    let fwd = state.network.forward(&mut tape, &params, &state.online.buffers, xv, Mode::Train)?;
    let z2 = target_embed(state, x2)?;

    let snapshot = state.queue.snapshot()?;
    let out = evaluate_objective(&mut tape, fwd.z, &z2, &snapshot, step_cfg.objective)?;
    let z1 = tape.value(fwd.z).clone();
    if !out.terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} at step {}: {}",
            out.terms.total,
            state.step,
            logit_stats(&z1, &z2, &snapshot)
        )));
    }

    tape.backward(out.loss)?;
    for (i, (&v, p)) in params.iter().zip(state.online.params.tensors.iter_mut()).enumerate() {
        let g = tape.grad(v).ok_or_else(|| Error::invalid("online parameter lost its gradient"))?;
        state.optimizer.update(i, p.data_mut(), g, step_cfg.lr)?;
    }
    state.online.commit_bn(&fwd.bn_stats, BN_MOMENTUM);

    ema_update(&mut state.target, &state.online, step_cfg.ema_m)?;
    state.queue.push(&z2)?;
    state.step += 1;
    Ok(StepOutput { terms: out.terms, negatives: snapshot.shape()[0], z1, z2 })
}

/// Pushes target embeddings of weak views until the queue holds at least
/// one batch (partial) or is full.
pub fn prime_queue(state: &mut TrainState, cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PRIMING_EPOCH, 0, 5)));
    let b = cfg.batch_size.min(data.len());
    let mut round = 0u64;
    loop {
        let done = match cfg.train.queue_warmup {
            QueueWarmup::Partial => state.queue.fill() > 0,
            QueueWarmup::Full => state.queue.is_full(),
        };
        if done {
            return Ok(());
        }
        let start = (round as usize * b) % data.len();
        let idx: Vec<usize> = (0..b).map(|k| order[(start + k) % data.len()]).collect();
        let x2 = apply_policy(&cfg.augment.weak, &data.images, &idx, cfg.seed, PRIMING_EPOCH - round, WEAK_VIEW)?;
        let z2 = target_embed(state, x2)?;
        state.queue.push(&z2)?;
        round += 1;
    }
}

/// Sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, 0, 4)));
    order
}

/// Exclusive use of an output directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub steps_per_epoch: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Largest relative gap of the logged loss decomposition (sce runs only).
    pub audit_max_residual: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";

/// Trains for `cfg.epochs` epochs (or `cfg.train.max_steps` steps) writing
/// `metrics.jsonl` and checkpoints under `cfg.output_dir`.
pub fn pretrain_run(cfg: &RunConfig, data: &Dataset, opts: &RunOptions) -> Result<(TrainState, RunSummary)> {
    cfg.validate()?;
    let (c, h, w) = data.image_shape();
    if c != cfg.encoder.channels || h != cfg.encoder.image_size || w != cfg.encoder.image_size {
        return Err(Error::Config(format!(
            "dataset images are {c}x{h}x{w} but the encoder expects {}x{s}x{s}",
            cfg.encoder.channels,
            s = cfg.encoder.image_size
        )));
    }
    let steps_per_epoch = data.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!("dataset of {} samples is smaller than one batch", data.len())));
    }
    let out_dir = cfg.output_path();
    let _lock = RunLock::acquire(&out_dir)?;
    let config_text = cfg.to_flat_string();
    let sched: ScheduleConfig = cfg.schedule(steps_per_epoch);
    let total = sched.total_steps() as u64;
    let limit = if cfg.train.max_steps == 0 { total } else { total.min(cfg.train.max_steps as u64) };

    let metrics_path = out_dir.join(METRICS_FILE);
    let (mut state, mut metrics) = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (TrainState::from_checkpoint(cfg, &ckpt)?, MetricsWriter::append(&metrics_path)?)
        }
        None => {
            let mut s = TrainState::new(cfg)?;
            prime_queue(&mut s, cfg, data)?;
            (s, MetricsWriter::create(&metrics_path)?)
        }
    };
    std::fs::write(out_dir.join("config.toml"), &config_text).map_err(|e| Error::io(out_dir.join("config.toml"), e))?;
    metrics.write(&Header {
        header: true,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: par::current_threads(),
        parallel: cfg!(feature = "parallel"),
        objective: cfg.objective.kind.to_string(),
        seed: cfg.seed,
        resumed_from_step: opts.resume.as_ref().map(|_| state.step),
    })?;

    let started = Instant::now();
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut audit = 0.0f64;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let save = |state: &TrainState, epoch_tag: Option<u64>| -> Result<()> {
        let ckpt = state.to_checkpoint(&config_text);
        save_checkpoint(&latest, &ckpt)?;
        if let Some(e) = epoch_tag {
            save_checkpoint(&out_dir.join(format!("checkpoint_epoch{e:03}.ckpt")), &ckpt)?;
        }
        Ok(())
    };

    while state.step < limit {
        let epoch = state.step / steps_per_epoch as u64;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let first = (state.step % steps_per_epoch as u64) as usize;
        for s in first..steps_per_epoch {
            if state.step >= limit {
                break;
            }
            let t = state.step as usize;
            let lr = lr_at(&sched, t)?;
            let ema_m = match cfg.optim.ema_schedule {
                EmaSchedule::Cosine => momentum_at(&sched, t)?,
                EmaSchedule::Constant => cfg.optim.ema_base,
            };
            let idx = &order[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let out = pretrain_step(&mut state, cfg, data, idx, epoch, &StepConfig { objective: &cfg.objective, lr, ema_m })?;
            if first_loss.is_nan() {
                first_loss = out.terms.total;
            }
            last_loss = out.terms.total;
            if cfg.objective.kind == ObjectiveKind::Sce && cfg.objective.mask_self_in_target {
                audit = audit.max(out.terms.decomposition_residual(cfg.objective.lambda));
            }
            metrics.write(&StepMetrics {
                step: state.step,
                epoch,
                lr,
                ema_m,
                loss: out.terms.total,
                loss_infonce: out.terms.infonce,
                loss_ressl: out.terms.ressl,
                loss_ceil: out.terms.ceil,
                queue_fill: out.negatives,
                wall_ms: if cfg.train.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            })?;
        }
        let finished_epoch = state.step % steps_per_epoch as u64 == 0;
        let done_epochs = state.step / steps_per_epoch as u64;
        if finished_epoch {
            let periodic = done_epochs.is_multiple_of(cfg.train.checkpoint_every.max(1) as u64);
            let last = done_epochs == cfg.epochs as u64;
            save(&state, (periodic || last).then_some(done_epochs))?;
        } else {
            save(&state, None)?;
        }
        metrics.flush()?;
        if opts.verbose {
            eprintln!(
                "epoch {done_epochs}/{} step {}/{limit} loss {last_loss:.4} ({:.1}s)",
                cfg.epochs,
                state.step,
                started.elapsed().as_secs_f64()
            );
        }
    }
    if !latest.exists() {
        save(&state, None)?;
    }
    let summary = RunSummary {
        steps: state.step,
        steps_per_epoch,
        first_loss,
        last_loss,
        audit_max_residual: audit,
        checkpoint: latest,
        metrics: metrics_path,
    };
    Ok((state, summary))
}

/// Restores the trained network and its run configuration from a checkpoint.
pub fn load_trained(path: &Path) -> Result<(RunConfig, TrainState)> {
    let ckpt = load_checkpoint(path)?;
    let text = std::str::from_utf8(ckpt.bytes("config")?)
        .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
    let cfg = RunConfig::parse(text)?;
    let state = TrainState::from_checkpoint(&cfg, &ckpt)?;
    Ok((cfg, state))
}

struct Composite {
    network: Network,
    buffers: crate::models::TensorList,
    images: Tensor<f64>,
    z2: Tensor<f64>,
    queue: Tensor<f64>,
    objective: ObjectiveConfig,
}

impl GradFn for Composite {
    fn eval<T: crate::Scalar>(&self, tape: &mut Tape<T>, params: &[crate::Var]) -> Result<crate::Var> {
        let x = tape.constant(self.images.cast());
        let out = self.network.forward(tape, params, &self.buffers, x, Mode::Train)?;
        Ok(evaluate_objective(tape, out.z, &self.z2.cast(), &self.queue.cast(), &self.objective)?.loss)
    }
}

/// Finite-difference check of images -> encoder -> projector -> `kind` loss
/// with respect to every online parameter, on a small random network.
pub fn composite_grad_check(kind: ObjectiveKind, seed: u64, coords_per_param: usize) -> Result<GradCheckReport> {
    use crate::models::{EncoderSpec, ProjectorSpec, Stem};
    use rand_distr::{Distribution, Uniform};

    let network = Network::new(
        EncoderSpec { channels: 3, image_size: 8, stem: Stem::Conv3x3, widths: vec![4, 6] },
        ProjectorSpec { hidden: vec![12], output: 6, batch_norm: true },
    )?;
    let store = network.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce);
    let pixel = Uniform::new(0.0f64, 1.0);
    let images = Tensor::from_vec(vec![4, 3, 8, 8], (0..4 * 3 * 64).map(|_| pixel.sample(&mut rng)).collect())?;
    let objective = ObjectiveConfig { kind, ..ObjectiveConfig::default() };
    let f = Composite {
        z2: crate::objectives::random_unit_rows::<f64>(4, 6, &mut rng),
        queue: crate::objectives::random_unit_rows::<f64>(10, 6, &mut rng),
        buffers: store.buffers.clone(),
        network,
        images,
        objective,
    };
    let params: Vec<Tensor<f64>> = store.params.tensors.iter().map(|t| t.cast()).collect();
    let cfg = GradCheckConfig {
        h: 1e-4,
        tol: 1e-3,
        max_coords: Some(coords_per_param),
        skip_nonsmooth: true,
        seed,
        ..GradCheckConfig::default()
    };
    grad_check::<f32, _>(&f, &params, &cfg)
}
