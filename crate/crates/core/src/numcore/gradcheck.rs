//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum relative error for a pass.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Coordinates whose true
    /// gradient is smaller than this are compared on an absolute scale.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `f` against central differences
/// of its loss, coordinate by coordinate.
///
/// `f` returns `(loss, gradient per input)`; gradients are laid out like the
/// inputs' data.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (loss, analytic) = f(inputs)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} gradients, got {}",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        passed: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.len() != inputs[ti].len() {
            return Err(Error::shape("gradcheck", inputs[ti].shape(), &[grad.len()]));
        }
        #[allow(clippy::needless_range_loop)]
        for k in 0..grad.len() {
            let orig = inputs[ti].data()[k];
            probe[ti].data_mut()[k] = orig + cfg.step;
            let (up, _) = f(&probe)?;
            probe[ti].data_mut()[k] = orig - cfg.step;
            let (down, _) = f(&probe)?;
            probe[ti].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbed loss at input {ti}, coordinate {k}"
                )));
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad[k];
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ti, k));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}
