use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar function of parameters that can be built on a tape at any precision.
pub trait GradFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Check at most this many coordinates per parameter (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    /// Absolute floor of the error denominator.
    pub floor: f64,
    /// Compare differences at `h` and `h/2` and skip coordinates where they
    /// disagree, i.e. where the step straddles a kink such as a ReLU hinge.
    pub skip_nonsmooth: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-4,
            max_coords: None,
            floor: 1e-10,
            skip_nonsmooth: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    /// `max_i |analytic_i - numeric_i| / max(|numeric|_inf, |analytic|_inf, floor)`.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_nonsmooth).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn eval_at<T: Scalar, F: GradFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.cast())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss)?.f64())
}

/// Compares the analytic gradient (taped at precision `T`) against central
/// finite differences evaluated in `f64`.
pub fn grad_check<T: Scalar, F: GradFn>(
    f: &F,
    params: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.cast())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x.f64()).collect())
                .ok_or_else(|| Error::invalid("parameter received no gradient slot"))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < param.len() => sample(&mut rng, param.len(), k).into_vec(),
            _ => (0..param.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        let mut halved = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = param.data()[c];
            let mut diff = |h: f64| -> Result<f64> {
                work[pi].data_mut()[c] = orig + h;
                let up = eval_at::<f64, F>(f, &work)?;
                work[pi].data_mut()[c] = orig - h;
                let down = eval_at::<f64, F>(f, &work)?;
                work[pi].data_mut()[c] = orig;
                Ok((up - down) / (2.0 * h))
            };
            numeric.push(diff(cfg.h)?);
            if cfg.skip_nonsmooth {
                halved.push(diff(cfg.h / 2.0)?);
            }
        }
        let a: Vec<f64> = coords.iter().map(|&c| analytic[pi][c]).collect();
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = inf(&numeric).max(inf(&a)).max(cfg.floor);
        let mut max_rel = 0.0f64;
        let mut skipped = 0;
        for (j, (&av, &nv)) in a.iter().zip(&numeric).enumerate() {
            if cfg.skip_nonsmooth && (nv - halved[j]).abs() > cfg.tol * scale {
                skipped += 1;
                continue;
            }
            max_rel = max_rel.max((av - nv).abs() / scale);
        }
        checks.push(ParamCheck {
            index: pi,
            checked: coords.len() - skipped,
            skipped_nonsmooth: skipped,
            max_rel_error: max_rel,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tol: cfg.tol,
        passed: max_rel_error <= cfg.tol,
    })
}
