//! Accuracy of a predicted temperature trajectory.
//!
//! The relative error uses an aggregate ratio with the reference shifted to
//! Kelvin: `100 * Σ|pred - gt| / Σ|gt + 273.15|`. Per-point division in °C is
//! unusable because recorded temperatures cross zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KELVIN_OFFSET: f64 = 273.15;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// °C
    pub mae: f64,
    /// °C²
    pub mse: f64,
    /// Percent.
    pub relative_error_pct: f64,
}

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if gt.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut denom) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let e = p - g;
        abs += e.abs();
        sq += e * e;
        denom += (g + KELVIN_OFFSET).abs();
    }
    let relative_error_pct = if denom > 0.0 { 100.0 * abs / denom } else { 0.0 };
    Ok(Metrics {
        mae: abs / n,
        mse: sq / n,
        relative_error_pct,
    })
}

/// Unweighted mean across sessions.
pub fn mean_metrics(rows: &[Metrics]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = rows.len() as f64;
    Ok(Metrics {
        mae: rows.iter().map(|m| m.mae).sum::<f64>() / n,
        mse: rows.iter().map(|m| m.mse).sum::<f64>() / n,
        relative_error_pct: rows.iter().map(|m| m.relative_error_pct).sum::<f64>() / n,
    })
}
