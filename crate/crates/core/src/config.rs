//! Run configuration in flat dotted-key TOML, e.g. `objective.tau_m = 0.05`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{gen_synthetic_blobs, load_cifar_binary, BlobsConfig, CifarVariant, Dataset};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::models::{EncoderSpec, ProjectorSpec};
use crate::objectives::ObjectiveConfig;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaSchedule {
    /// Half cosine from `ema_base` up to 1.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub reference_batch: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_base: f64,
    pub ema_schedule: EmaSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.06,
            reference_batch: 256,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_base: 0.99,
            ema_schedule: EmaSchedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// View fed to the online network.
    pub strong: AugmentationPolicy,
    /// View fed to the target network.
    pub weak: AugmentationPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { strong: AugmentationPolicy::strong(), weak: AugmentationPolicy::weak() }
    }
}

const HELD_OUT_SEED: u64 = 0x07e5_75e7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// CIFAR binary file; unused for blobs.
    pub path: String,
    /// CIFAR binary file scored by the probe; unused for blobs.
    pub test_path: String,
    pub blobs: BlobsConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DataKind::Blobs, path: String::new(), test_path: String::new(), blobs: BlobsConfig::default() }
    }
}

impl DataConfig {
    pub fn cifar_variant(&self) -> Option<CifarVariant> {
        match self.kind {
            DataKind::Blobs => None,
            DataKind::Cifar10 => Some(CifarVariant::Cifar10),
            DataKind::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }

    /// Generates or reads the configured training set.
    pub fn load(&self) -> Result<Dataset> {
        match self.cifar_variant() {
            None => gen_synthetic_blobs(&self.blobs),
            Some(v) if self.path.is_empty() => Err(Error::Config(format!("data.path is required for {v:?}"))),
            Some(v) => load_cifar_binary(Path::new(&self.path), v),
        }
    }

    /// Held-out split for the probe: a fifth-size blobs draw under a
    /// different seed, or the CIFAR test file.
    pub fn load_test(&self) -> Result<Dataset> {
        match self.cifar_variant() {
            None => gen_synthetic_blobs(&BlobsConfig {
                per_class: (self.blobs.per_class / 5).max(1),
                seed: self.blobs.seed ^ HELD_OUT_SEED,
                ..self.blobs.clone()
            }),
            Some(v) if self.test_path.is_empty() => Err(Error::Config(format!("data.test_path is required for {v:?}"))),
            Some(v) => load_cifar_binary(Path::new(&self.test_path), v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueWarmup {
    /// Seed the queue with one batch of target embeddings, then train
    /// against the partially filled queue.
    Partial,
    /// Fill the whole queue with target embeddings before the first step.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub queue_warmup: QueueWarmup,
    /// When false `wall_ms` is logged as 0, which makes metrics files
    /// byte-comparable across runs.
    pub record_wall_time: bool,
    /// Stop after this many optimizer steps in total; 0 means no limit.
    pub max_steps: usize,
    /// Write a checkpoint every this many epochs (the last epoch always gets one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { queue_warmup: QueueWarmup::Partial, record_wall_time: true, max_steps: 0, checkpoint_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub queue_size: usize,
    pub output_dir: String,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            queue_size: 1024,
            output_dir: "runs/default".into(),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
            encoder: EncoderSpec::default(),
            projector: ProjectorSpec::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be >= 1 and batch_size >= 2".into()));
        }
        if self.queue_size < self.batch_size {
            return Err(Error::Config(format!(
                "queue_size {} must be at least batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if self.encoder.image_size == 0 {
            return Err(Error::Config("encoder.image_size must be positive".into()));
        }
        self.objective.validate()?;
        self.encoder.validate()?;
        self.projector.validate()?;
        self.augment.strong.validate()?;
        self.augment.weak.validate()?;
        self.probe.validate()?;
        self.schedule(1).validate()
    }

    /// Schedule for a dataset yielding `steps_per_epoch` full batches.
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.optim.base_lr,
            batch_size: self.batch_size,
            reference_batch: self.optim.reference_batch,
            warmup_epochs: self.optim.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch,
            ema_base: self.optim.ema_base,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn output_path(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// One `dotted.key = value` line per leaf, sorted by key.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is representable as TOML");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Applies `key = value` overrides given in the flat syntax.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut text = self.to_flat_string();
        let mut seen = Vec::new();
        for o in overrides {
            let key = o
                .split_once('=')
                .map(|(k, _)| k.trim().to_string())
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key = value")))?;
            seen.push(key);
        }
        text = text
            .lines()
            .filter(|l| {
                let k = l.split_once('=').map(|(k, _)| k.trim()).unwrap_or("");
                !seen.iter().any(|s| s == k)
            })
            .collect::<Vec<_>>()
            .join("\n");
        for o in overrides {
            text.push('\n');
            text.push_str(o);
        }
        Self::parse(&text)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.objective.tau_m = 0.03;
        cfg.encoder.widths = vec![8, 16];
        cfg.data.kind = DataKind::Cifar100;
        cfg.data.path = "data/train.bin".into();
        let text = cfg.to_flat_string();
        assert!(text.contains("objective.tau_m = 0.03\n"));
        assert!(text.lines().all(|l| !l.starts_with('[')));
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_flat_string(), text);
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::parse("objective.kind = \"ressl\"\nepochs = 6\n").unwrap();
        assert_eq!(cfg.epochs, 6);
        assert_eq!(cfg.objective.kind, crate::objectives::ObjectiveKind::Ressl);
        assert_eq!(cfg.objective.tau, 0.1);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::parse("objective.bogus = 1").is_err());
        assert!(RunConfig::parse("objective.tau = -1.0").is_err());
        assert!(RunConfig::parse("queue_size = 8\nbatch_size = 16").is_err());
        assert!(RunConfig::parse("optim.warmup_epochs = 50\nepochs = 10").is_err());
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }

    #[test]
    fn overrides_replace_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["objective.lambda = 0.25".into(), "seed = 7".into()])
            .unwrap();
        assert_eq!(cfg.objective.lambda, 0.25);
        assert_eq!(cfg.seed, 7);
        assert!(RunConfig::default().with_overrides(&["nonsense".into()]).is_err());
    }
}
