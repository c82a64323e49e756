//! Learning-rate and EMA-momentum schedules, and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Learning rate at the reference batch size.
    pub base_lr: f64,
    pub batch_size: usize,
    pub reference_batch: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    /// EMA momentum at step 0; it rises to 1 along a half cosine.
    pub ema_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.06,
            batch_size: 256,
            reference_batch: 256,
            warmup_epochs: 5,
            total_epochs: 200,
            steps_per_epoch: 1,
            ema_base: 0.996,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.reference_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return bad("schedule needs at least one epoch and one step per epoch".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_base) {
            return bad(format!("ema_base must lie in [0, 1], got {}", self.ema_base));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("base_lr and weight_decay must be nonnegative".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }
}

/// `base_lr * batch_size / reference_batch`.
pub fn scaled_base_lr(cfg: &ScheduleConfig) -> f64 {
    cfg.base_lr * cfg.batch_size as f64 / cfg.reference_batch as f64
}

/// Linear warmup from 0 to the scaled rate, then a cosine that reaches 0 at
/// the last step.
pub fn lr_at(cfg: &ScheduleConfig, step: usize) -> Result<f64> {
    let total = cfg.total_steps();
    if step >= total {
        return Err(Error::invalid(format!("step {step} outside schedule of {total} steps")));
    }
    let peak = scaled_base_lr(cfg);
    let warm = cfg.warmup_steps();
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let span = total - 1 - warm.min(total - 1);
    let progress = if span == 0 { 0.0 } else { (step - warm) as f64 / span as f64 };
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `1 - (1 - m0) * (cos(pi t / T) + 1) / 2` for `t` in `0..=T`.
pub fn momentum_at(cfg: &ScheduleConfig, step: usize) -> Result<f64> {
    let total = cfg.total_steps();
    if step > total {
        return Err(Error::invalid(format!("step {step} outside schedule of {total} steps")));
    }
    let t = step as f64 / total as f64;
    Ok(1.0 - (1.0 - cfg.ema_base) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One velocity buffer per parameter, in parameter order.
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `v <- momentum v + g + wd theta; theta <- theta - lr v` on parameter `index`.
    pub fn update(&mut self, index: usize, param: &mut [f32], grad: &[f32], lr: f64) -> Result<()> {
        let v = self
            .velocity
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("no optimizer slot for parameter {index}")))?;
        sgd_update(param, grad, v, lr, self.momentum, self.weight_decay)
    }
}

pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            left: vec![param.len()],
            right: vec![grad.len(), velocity.len()],
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i].f64())));
    }
    let (lr, mom, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mom * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}
