//! InfoNCE, relational (ReSSL-style), SCE and ceiling losses.
//!
//! Losses work on a candidate layout of `M + 1` columns per query: slot 0 is
//! the positive pair, slots `1..=M` are the memory-queue entries. All
//! target-side quantities (the momentum embeddings `z2`, the queue, the
//! relation targets) enter the tape as constants, so gradients only reach the
//! online embeddings `z1`.
//!
//! With `mu = eta = 1 - lambda` the SCE loss decomposes exactly into
//! `lambda * infonce + (1 - lambda) * (ressl + ceil)`;
//! [`verify_decomposition`] checks this numerically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{kernels, Mask, Scalar, Tape, Tensor, Var};

/// Probabilities below this are clamped inside the cross-entropy log.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Sce,
    Infonce,
    Ressl,
    Combined,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sce" => Ok(Self::Sce),
            "infonce" | "moco" => Ok(Self::Infonce),
            "ressl" => Ok(Self::Ressl),
            "combined" => Ok(Self::Combined),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sce => "sce",
            Self::Infonce => "infonce",
            Self::Ressl => "ressl",
            Self::Combined => "combined",
        })
    }
}

/// Loss selection and every loss hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Weight of the positive one-hot in the SCE target.
    pub lambda: f64,
    /// Weight of the relational term in the combined loss.
    pub mu: f64,
    /// Weight of the ceiling term in the combined loss.
    pub eta: f64,
    /// Online temperature.
    pub tau: f64,
    /// Target (sharpening) temperature.
    pub tau_m: f64,
    /// Give the self slot of the relation target exactly zero mass. When
    /// false the slot keeps a raw logit of 0 inside the softmax instead.
    pub mask_self_in_target: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Sce,
            lambda: 0.5,
            mu: 0.5,
            eta: 0.5,
            tau: 0.1,
            tau_m: 0.05,
            mask_self_in_target: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("objective.tau must be positive, got {}", self.tau)));
        }
        if !(self.tau_m > 0.0 && self.tau_m.is_finite()) {
            return Err(Error::Config(format!("objective.tau_m must be positive, got {}", self.tau_m)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("objective.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.mu >= 0.0 && self.eta >= 0.0) {
            return Err(Error::Config("objective.mu and objective.eta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Similarities of each query against its positive and the negatives.
#[derive(Clone, Debug)]
pub struct LogitsBlock {
    /// `N x 1`: query dot positive.
    pub pos: Var,
    /// `N x M`: query dot every queue entry.
    pub neg: Var,
    /// Queue entries excluded per row (`N x M`, `true` = excluded).
    pub neg_mask: Option<Mask>,
}

impl LogitsBlock {
    pub fn dims<T: Scalar>(&self, tape: &Tape<T>) -> (usize, usize) {
        let s = tape.value(self.neg).shape();
        (s[0], s[1])
    }

    /// `N x (M + 1)` candidate matrix with the positive in slot 0.
    pub fn candidates<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.concat_cols(&[self.pos, self.neg])
    }

    /// Mask over the `M + 1` candidate slots; `mask_positive` also removes slot 0.
    pub fn candidate_mask<T: Scalar>(&self, tape: &Tape<T>, mask_positive: bool) -> Option<Mask> {
        let (n, m) = self.dims(tape);
        if !mask_positive && self.neg_mask.is_none() {
            return None;
        }
        Some(candidate_mask(n, m, mask_positive, self.neg_mask.as_ref()))
    }
}

fn candidate_mask(n: usize, m: usize, mask_positive: bool, neg_mask: Option<&Mask>) -> Mask {
    let mut masked = Vec::with_capacity(n * (m + 1));
    for i in 0..n {
        masked.push(mask_positive);
        match neg_mask {
            Some(nm) => masked.extend_from_slice(nm.row(i)),
            None => masked.extend(std::iter::repeat_n(false, m)),
        }
    }
    Mask::new(n, m + 1, masked).expect("mask dims computed from n and m")
}

/// `pos_i = a_i . b_pos_i` and `neg = a . queue^T`.
pub fn similarity_logits<T: Scalar>(tape: &mut Tape<T>, a: Var, b_pos: Var, queue: Var) -> Result<LogitsBlock> {
    let pos = tape.row_dot(a, b_pos)?;
    let neg = tape.matmul_nt(a, queue)?;
    Ok(LogitsBlock { pos, neg, neg_mask: None })
}

/// Queue-free batch layout: the batch's own `z2` rows serve as the queue and
/// each row's duplicate of its positive is excluded, so the candidates of row
/// `i` are exactly `{z2_k}` with `z2_i` in slot 0.
pub fn batch_logits<T: Scalar>(tape: &mut Tape<T>, z1: Var, z2: Var) -> Result<LogitsBlock> {
    let (n, _) = tape.value(z2).dims2("batch_logits")?;
    let mut block = similarity_logits(tape, z1, z2, z2)?;
    block.neg_mask = Some(Mask::diagonal(n));
    Ok(block)
}

/// `-(1/N) sum_i log softmax_0(candidates_i / tau)`.
pub fn info_nce_loss<T: Scalar>(tape: &mut Tape<T>, logits: &LogitsBlock, tau: f64) -> Result<Var> {
    let all = logits.candidates(tape)?;
    let mask = logits.candidate_mask(tape, false);
    let lse = tape.logsumexp_rows(all, tau, mask.as_ref())?;
    let pos = tape.scale(logits.pos, T::of(1.0 / tau));
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row))
}

/// `-(1/N) sum_i log(sum_neg exp / (exp(pos) + sum_neg exp))`, all over `tau`.
pub fn ceil_loss<T: Scalar>(tape: &mut Tape<T>, logits: &LogitsBlock, tau: f64) -> Result<Var> {
    let all = logits.candidates(tape)?;
    let all_mask = logits.candidate_mask(tape, false);
    let neg_mask = logits.candidate_mask(tape, true);
    let lse_all = tape.logsumexp_rows(all, tau, all_mask.as_ref())?;
    let lse_neg = tape.logsumexp_rows(all, tau, neg_mask.as_ref())?;
    let per_row = tape.sub(lse_all, lse_neg)?;
    Ok(tape.mean(per_row))
}

/// Sharpened relation distribution of each `z2_i` over the queue,
/// `N x (M + 1)`, detached. Slot 0 (self) is masked to exactly zero when
/// `mask_self`, otherwise it takes part in the softmax with logit 0.
pub fn target_relations<T: Scalar>(z2: &Tensor<T>, queue: &Tensor<T>, tau_m: f64, mask_self: bool) -> Result<Tensor<T>> {
    target_relations_excluding(z2, queue, tau_m, mask_self, None)
}

/// [`target_relations`] with per-row exclusion of queue entries.
pub fn target_relations_excluding<T: Scalar>(
    z2: &Tensor<T>,
    queue: &Tensor<T>,
    tau_m: f64,
    mask_self: bool,
    neg_mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    if !(tau_m > 0.0) {
        return Err(Error::invalid(format!("tau_m must be positive, got {tau_m}")));
    }
    let (n, d) = z2.dims2("target_relations")?;
    let (m, d2) = queue.dims2("target_relations")?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "target_relations",
            left: vec![n, d],
            right: vec![m, d2],
        });
    }
    let mut sims = vec![T::zero(); n * (m + 1)];
    let mut neg = vec![T::zero(); n * m];
    kernels::gemm(n, d, m, z2.data(), false, queue.data(), true, T::zero(), &mut neg);
    for i in 0..n {
        sims[i * (m + 1) + 1..(i + 1) * (m + 1)].copy_from_slice(&neg[i * m..(i + 1) * m]);
    }
    let mask = candidate_mask(n, m, mask_self, neg_mask);
    let mut out = vec![T::zero(); n * (m + 1)];
    for i in 0..n {
        let r = i * (m + 1)..(i + 1) * (m + 1);
        if !kernels::softmax_row(&sims[r.clone()], tau_m, Some(mask.row(i)), &mut out[r]) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    Ok(Tensor::raw(vec![n, m + 1], out))
}

/// Online relation distribution with the positive slot masked out.
pub fn online_relations_masked<T: Scalar>(tape: &mut Tape<T>, logits: &LogitsBlock, tau: f64) -> Result<Var> {
    let all = logits.candidates(tape)?;
    let mask = logits.candidate_mask(tape, true);
    tape.softmax_rows(all, tau, mask.as_ref())
}

/// Cross-entropy between the detached relation target and the masked online
/// relation distribution.
pub fn ressl_loss<T: Scalar>(tape: &mut Tape<T>, p2: &Tensor<T>, p1: Var) -> Result<Var> {
    let pred = tape.value(p1);
    if pred.shape() != p2.shape() {
        return Err(Error::ShapeMismatch {
            op: "ressl_loss",
            left: p2.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    let k = p2.shape()[1];
    for (idx, (&t, &p)) in p2.data().iter().zip(pred.data()).enumerate() {
        if t > T::zero() && p == T::zero() {
            return Err(Error::InconsistentMask {
                row: idx / k,
                slot: idx % k,
                mass: t.f64(),
            });
        }
    }
    let target = tape.constant(p2.clone());
    tape.cross_entropy_rows(target, p1, CE_EPS)
}

/// `w2 = lambda * e_0 + (1 - lambda) * p2`.
pub fn sce_target<T: Scalar>(p2: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let (n, k) = p2.dims2("sce_target")?;
    let lam = T::of(lambda);
    let rest = T::of(1.0 - lambda);
    let mut out: Vec<T> = p2.data().iter().map(|&p| rest * p).collect();
    for i in 0..n {
        out[i * k] = out[i * k] + lam;
    }
    Ok(Tensor::raw(vec![n, k], out))
}

/// Unmasked online distribution over all `M + 1` candidates.
pub fn sce_online<T: Scalar>(tape: &mut Tape<T>, logits: &LogitsBlock, tau: f64) -> Result<Var> {
    let all = logits.candidates(tape)?;
    let mask = logits.candidate_mask(tape, false);
    tape.softmax_rows(all, tau, mask.as_ref())
}

pub fn sce_loss<T: Scalar>(tape: &mut Tape<T>, w2: &Tensor<T>, p1: Var) -> Result<Var> {
    let target = tape.constant(w2.clone());
    tape.cross_entropy_rows(target, p1, CE_EPS)
}

/// `lambda * infonce + mu * ressl + eta * ceil`. `p2` must be the masked
/// relation target.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, logits: &LogitsBlock, p2: &Tensor<T>, cfg: &ObjectiveConfig) -> Result<Var> {
    let nce = info_nce_loss(tape, logits, cfg.tau)?;
    let p1 = online_relations_masked(tape, logits, cfg.tau)?;
    let rel = ressl_loss(tape, p2, p1)?;
    let ceil = ceil_loss(tape, logits, cfg.tau)?;
    tape.weighted_sum(&[(nce, T::of(cfg.lambda)), (rel, T::of(cfg.mu)), (ceil, T::of(cfg.eta))])
}

/// Values of the optimized loss and of its three components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub infonce: f64,
    pub ressl: f64,
    pub ceil: f64,
}

impl LossTerms {
    /// Relative gap between `total` and `lambda * infonce + (1 - lambda) * (ressl + ceil)`.
    pub fn decomposition_residual(&self, lambda: f64) -> f64 {
        let rhs = lambda * self.infonce + (1.0 - lambda) * (self.ressl + self.ceil);
        (self.total - rhs).abs() / self.total.abs().max(1.0)
    }
}

pub struct ObjectiveOutput {
    pub loss: Var,
    pub terms: LossTerms,
}

/// Builds the configured loss for online embeddings `z1` against detached
/// momentum embeddings `z2` and a queue snapshot. The component terms are
/// always evaluated so they can be logged.
pub fn evaluate_objective<T: Scalar>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: &Tensor<T>,
    queue: &Tensor<T>,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    let z2v = tape.constant(z2.clone());
    let qv = tape.constant(queue.clone());
    let logits = similarity_logits(tape, z1, z2v, qv)?;
    let p2_masked = target_relations(z2, queue, cfg.tau_m, true)?;

    let nce = info_nce_loss(tape, &logits, cfg.tau)?;
    let p1_rel = online_relations_masked(tape, &logits, cfg.tau)?;
    let rel = ressl_loss(tape, &p2_masked, p1_rel)?;
    let ceil = ceil_loss(tape, &logits, cfg.tau)?;

    let loss = match cfg.kind {
        ObjectiveKind::Sce => {
            let p2 = if cfg.mask_self_in_target {
                p2_masked
            } else {
                target_relations(z2, queue, cfg.tau_m, false)?
            };
            let w2 = sce_target(&p2, cfg.lambda)?;
            let p1 = sce_online(tape, &logits, cfg.tau)?;
            sce_loss(tape, &w2, p1)?
        }
        ObjectiveKind::Infonce => nce,
        ObjectiveKind::Ressl => rel,
        ObjectiveKind::Combined => tape.weighted_sum(&[
            (nce, T::of(cfg.lambda)),
            (rel, T::of(cfg.mu)),
            (ceil, T::of(cfg.eta)),
        ])?,
    };
    let value = |v: Var| -> Result<f64> { Ok(tape.scalar_value(v)?.f64()) };
    let terms = LossTerms {
        total: value(loss)?,
        infonce: value(nce)?,
        ressl: value(rel)?,
        ceil: value(ceil)?,
    };
    Ok(ObjectiveOutput { loss, terms })
}

/// Grid swept by [`verify_decomposition`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub trials: usize,
    pub batch_sizes: Vec<usize>,
    pub queue_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub tau: f64,
    pub tau_m: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            batch_sizes: vec![2, 8, 32],
            queue_sizes: vec![1, 4, 16, 64],
            dims: vec![8, 64],
            lambdas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            tau: 0.1,
            tau_m: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub lambda: f64,
    pub trial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub precision: String,
    pub evaluations: usize,
    pub max_residual: f64,
    pub worst: Option<WorstCase>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Pass threshold of the decomposition check at precision `T`.
pub fn decomposition_tolerance<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() >= 8 {
        1e-10
    } else {
        1e-5
    }
}

/// Random unit-norm rows from a seeded generator.
pub fn random_unit_rows<T: Scalar>(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.iter().map(|x| T::of(x / n)));
    }
    Tensor::raw(vec![rows, dim], data)
}

/// Checks `L_SCE = lambda L_InfoNCE + (1 - lambda)(L_ReSSL + L_ceil)` on
/// random unit-norm embeddings over the configured grid.
pub fn verify_decomposition<T: Scalar>(cfg: &VerifyConfig) -> Result<VerifyReport> {
    verify_decomposition_with::<T, _>(cfg, |tape, logits, tau| ceil_loss(tape, logits, tau))
}

/// [`verify_decomposition`] with a caller-supplied ceiling term.
pub fn verify_decomposition_with<T, C>(cfg: &VerifyConfig, ceil: C) -> Result<VerifyReport>
where
    T: Scalar,
    C: Fn(&mut Tape<T>, &LogitsBlock, f64) -> Result<Var> + Sync,
{
    if cfg.trials == 0 {
        return Err(Error::invalid("verify needs at least one trial"));
    }
    let mut shapes = Vec::new();
    for &n in &cfg.batch_sizes {
        for &m in &cfg.queue_sizes {
            for &d in &cfg.dims {
                shapes.push((n, m, d));
            }
        }
    }
    let jobs = shapes.len() * cfg.trials;
    let results = par::map_range(jobs, |job| -> Result<(f64, WorstCase)> {
        let (n, m, d) = shapes[job / cfg.trials];
        let trial = job % cfg.trials;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (job as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let z1 = random_unit_rows::<T>(n, d, &mut rng);
        let z2 = random_unit_rows::<T>(n, d, &mut rng);
        let queue = random_unit_rows::<T>(m, d, &mut rng);
        let p2 = target_relations(&z2, &queue, cfg.tau_m, true)?;
        let mut worst = (0.0f64, WorstCase { n, m, d, lambda: 0.0, trial });
        for &lambda in &cfg.lambdas {
            let mut tape = Tape::<T>::new();
            let z1v = tape.constant(z1.clone());
            let z2v = tape.constant(z2.clone());
            let qv = tape.constant(queue.clone());
            let logits = similarity_logits(&mut tape, z1v, z2v, qv)?;
            let w2 = sce_target(&p2, lambda)?;
            let p1 = sce_online(&mut tape, &logits, cfg.tau)?;
            let sce = sce_loss(&mut tape, &w2, p1)?;
            let nce = info_nce_loss(&mut tape, &logits, cfg.tau)?;
            let p1_rel = online_relations_masked(&mut tape, &logits, cfg.tau)?;
            let rel = ressl_loss(&mut tape, &p2, p1_rel)?;
            let cl = ceil(&mut tape, &logits, cfg.tau)?;
            let terms = LossTerms {
                total: tape.scalar_value(sce)?.f64(),
                infonce: tape.scalar_value(nce)?.f64(),
                ressl: tape.scalar_value(rel)?.f64(),
                ceil: tape.scalar_value(cl)?.f64(),
            };
            let r = terms.decomposition_residual(lambda);
            if !(r <= worst.0) {
                worst = (r, WorstCase { n, m, d, lambda, trial });
            }
        }
        Ok(worst)
    });
    let mut max_residual = 0.0f64;
    let mut worst = None;
    for r in results {
        let (res, case) = r?;
        if !(res <= max_residual) || worst.is_none() {
            max_residual = if res.is_nan() { f64::INFINITY } else { res.max(max_residual) };
            worst = Some(case);
        }
    }
    let tolerance = decomposition_tolerance::<T>();
    Ok(VerifyReport {
        precision: T::NAME.to_string(),
        evaluations: jobs * cfg.lambdas.len(),
        max_residual,
        worst,
        tolerance,
        passed: max_residual <= tolerance,
    })
}

#[cfg(test)]
mod tests;
