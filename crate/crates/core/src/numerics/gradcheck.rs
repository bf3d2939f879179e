//! Central-difference gradient verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub num_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error at this scale.
const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic` against `(f(p + h e_i) - f(p - h e_i)) / 2h` for every
/// parameter. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} params but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut max_rel_error = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss_fn(&probe);
        probe[i] = orig - step;
        let minus = loss_fn(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Check {
                probe: format!("parameter {i}"),
                reason: format!("loss not finite at perturbed point ({plus}, {minus})"),
            });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst_index,
        num_params: params.len(),
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}
