//! RMSE, MAE, relative fitting error and success rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference norms below this leave RFE undefined.
pub const RFE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the reference norm is below [`RFE_NORM_FLOOR`].
    pub rfe: Option<f64>,
    pub n_entries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rfe_error: Option<String>,
}

impl MetricsReport {
    pub fn rfe(&self) -> Result<f64> {
        self.rfe.ok_or(Error::RfeUndefined { norm: 0.0 })
    }
}

/// Metrics of `pred` against `truth` over the same entries.
pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::dims(format!("{} predictions for {} reference values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metrics need at least one entry"));
    }
    let n = pred.len() as f64;
    let (mut sq, mut abs, mut ref_sq) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let r = p - t;
        sq += r * r;
        abs += r.abs();
        ref_sq += t * t;
    }
    let ref_norm = ref_sq.sqrt();
    let (rfe, rfe_error) = if ref_norm < RFE_NORM_FLOOR {
        (None, Some(Error::RfeUndefined { norm: ref_norm }.to_string()))
    } else {
        (Some(sq.sqrt() / ref_norm), None)
    };
    Ok(MetricsReport { rmse: (sq / n).sqrt(), mae: abs / n, rfe, n_entries: pred.len(), rfe_error })
}

/// Fraction of runs whose RFE is strictly below one.
pub fn success_rate(rfe_values: &[f64]) -> Result<f64> {
    if rfe_values.is_empty() {
        return Err(Error::invalid("success rate of an empty list"));
    }
    let ok = rfe_values.iter().filter(|&&v| v < 1.0).count();
    Ok(ok as f64 / rfe_values.len() as f64)
}
