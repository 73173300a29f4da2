use serde::Serialize;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Forward value plus the hand-derived backward procedure that produced it.
///
/// `G` is whatever gradient bundle the producing operation returns, usually
/// the input gradient together with a params-shaped gradient struct.
pub struct GradPair<'a, S, G> {
    pub value: Tensor<S>,
    backward: Box<dyn FnOnce(&Tensor<S>) -> G + 'a>,
}

impl<'a, S: Scalar, G> GradPair<'a, S, G> {
    pub fn new(value: Tensor<S>, backward: impl FnOnce(&Tensor<S>) -> G + 'a) -> Self {
        Self {
            value,
            backward: Box::new(backward),
        }
    }

    /// Runs the backward procedure with `upstream = ∂loss/∂value`.
    pub fn backward(self, upstream: &Tensor<S>) -> G {
        (self.backward)(upstream)
    }

    pub fn into_parts(self) -> (Tensor<S>, Box<dyn FnOnce(&Tensor<S>) -> G + 'a>) {
        (self.value, self.backward)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_rel_error: f64,
    /// `(param index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Compares analytic gradients with central differences
/// `(f(p+h) − f(p−h)) / 2h`, entry by entry.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradient<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if !(cfg.step > 0.0) {
        return Err(Error::config("gradient check step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape("check_gradient", &[params.len()], &[analytic.len()]));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::shape("check_gradient", p.shape(), g.shape()));
        }
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let v = f(work);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradient check objective".into()))
        }
    };
    eval(&work)?;

    let mut report = GradCheckReport {
        entries: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + cfg.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - cfg.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

/// Central-difference derivative of `f` with respect to one entry.
pub fn central_difference<F>(mut f: F, params: &[Tensor<f64>], param: usize, index: usize, step: f64) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work = params.to_vec();
    let orig = work[param].data()[index];
    work[param].data_mut()[index] = orig + step;
    let plus = f(&work);
    work[param].data_mut()[index] = orig - step;
    let minus = f(&work);
    (plus - minus) / (2.0 * step)
}
