use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::targets::{eval_test_function, TestFunction};

use super::WeightedEnsemble;

/// Normalized weights `w̄`, computed in log space.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::DegenerateEnsemble("NaN or +inf log-weight".into()));
    }
    let z = log_sum_exp(log_weights)?;
    if z == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble("every log-weight is -inf".into()));
    }
    Ok(log_weights.iter().map(|w| (w - z).exp()).collect())
}

/// `1 / sum(w̄^2)` from raw log-weights.
pub fn ess_from_log_weights(log_weights: &[f64]) -> Result<f64> {
    normalized_weights(log_weights)?;
    let z = log_sum_exp(log_weights)?;
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    let ess = (2.0 * z - log_sum_exp(&doubled)?).exp();
    Ok(ess.clamp(1.0, log_weights.len() as f64))
}

/// Self-normalized estimate with its delta-method standard error
/// `sqrt(sum w̄^2 (phi - estimate)^2)`.
pub fn snis_from_values(log_weights: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if values.len() != log_weights.len() {
        return Err(Error::Shape(format!("{} values for {} weights", values.len(), log_weights.len())));
    }
    let w = normalized_weights(log_weights)?;
    let est: f64 = w.iter().zip(values).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum();
    let var: f64 = w
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * w * (v - est) * (v - est))
        .sum();
    Ok((est, var.sqrt()))
}

pub fn snis_estimate(ensemble: &WeightedEnsemble, phi: TestFunction) -> Result<(f64, f64)> {
    let values = eval_test_function(phi, &ensemble.samples)?;
    snis_from_values(&ensemble.log_weights, &values)
}

pub fn ess(ensemble: &WeightedEnsemble) -> Result<f64> {
    ess_from_log_weights(&ensemble.log_weights)
}
