//! Central finite-difference verification of analytic gradients.
//!
//! The analytic gradient is taken in the precision under test; the numeric
//! reference is always evaluated in `f64`.

use std::fmt;

use crate::error::TensorError;
use crate::real::Real;
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar function of a list of parameter tensors, defined for any precision.
pub trait Objective {
    type Error: From<TensorError> + fmt::Display;

    fn loss<'t, T: Real>(&self, tape: &'t Tape<T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>, Self::Error>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; tensors at most this large are checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, tolerance: 1e-3, samples_per_param: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks.iter().filter(|c| c.rel_err > self.tolerance)
    }

    /// Worst relative error per parameter index.
    pub fn per_param(&self) -> Vec<f64> {
        let n = self.checks.iter().map(|c| c.param + 1).max().unwrap_or(0);
        let mut worst = vec![0.0; n];
        for c in &self.checks {
            worst[c.param] = f64::max(worst[c.param], c.rel_err);
        }
        worst
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coordinates, max rel-err {:.3e} (tol {:.0e}): {}",
            self.checks.len(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn sample_indices(numel: usize, count: usize, rng: &mut RngState) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let mut all: Vec<usize> = (0..numel).collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Compares given analytic gradients with central differences of `eval`.
pub fn compare_with_numeric<E>(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<f64, E>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E> {
    let root = RngState::new(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::new();
    for (pi, (p, a)) in params.iter().zip(analytic).enumerate() {
        let mut rng = root.split(pi as u64);
        for idx in sample_indices(p.numel(), opts.samples_per_param, &mut rng) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = a.data()[idx];
            checks.push(CoordCheck { param: pi, index: idx, analytic, numeric, rel_err: relative_error(analytic, numeric) });
        }
    }
    Ok(GradCheckReport { tolerance: opts.tolerance, checks })
}

/// Value and gradients of `obj` at `params`, computed in precision `T`.
pub fn value_and_grad<T: Real, O: Objective>(obj: &O, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>), O::Error> {
    let tape = Tape::<T>::new();
    let vars: Vec<Var<'_, T>> = params.iter().map(|p| tape.param(p.cast())).collect();
    let loss = obj.loss(&tape, &vars)?;
    let value = loss.item().as_f64();
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v).cast()).collect()))
}

fn eval_f64<O: Objective>(obj: &O, params: &[Tensor<f64>]) -> Result<f64, O::Error> {
    let tape = Tape::<f64>::new().with_paranoid(false);
    let vars: Vec<Var<'_, f64>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    Ok(obj.loss(&tape, &vars)?.item())
}

/// Checks the gradient of `obj` computed in precision `T` against `f64` central differences.
pub fn finite_diff_check<T: Real, O: Objective>(
    obj: &O,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, O::Error> {
    let (_, analytic) = value_and_grad::<T, O>(obj, params)?;
    compare_with_numeric(params, &analytic, |p| eval_f64(obj, p), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Objective for Quadratic {
        type Error = TensorError;

        fn loss<'t, T: Real>(&self, _tape: &'t Tape<T>, p: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
            p[0].square()?.sum_all()
        }
    }

    #[test]
    fn quadratic_agrees_to_rounding() {
        let theta = Tensor::from_fn([5], |i| i as f64 - 1.7);
        let r = finite_diff_check::<f64, _>(&Quadratic, &[theta], &GradCheckOptions::default()).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err() < 1e-9, "{r}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
