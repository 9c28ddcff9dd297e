//! Point-prediction metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mse: f64,
    /// Mean absolute percentage error over targets with `|y| > 1e-8`, in percent.
    pub mape: f64,
    /// Mean negative log predictive density under independent Gaussians.
    pub nlpd: f64,
    pub n: usize,
}

/// `var` is the full predictive variance, noise included.
pub fn evaluate(y: &[f64], mean: &[f64], var: &[f64]) -> Result<Metrics> {
    if mean.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), found: mean.len() });
    }
    if var.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), found: var.len() });
    }
    if y.is_empty() {
        return Err(Error::invalid("no targets to evaluate"));
    }
    let n = y.len() as f64;
    let mse = y.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let (mut ape, mut k) = (0.0, 0usize);
    for (a, b) in y.iter().zip(mean) {
        if a.abs() > 1e-8 {
            ape += ((a - b) / a).abs();
            k += 1;
        }
    }
    let mape = if k == 0 { f64::NAN } else { 100.0 * ape / k as f64 };
    let mut nlpd = 0.0;
    for ((a, b), v) in y.iter().zip(mean).zip(var) {
        let v = v.max(1e-300);
        nlpd += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (a - b).powi(2) / v);
    }
    Ok(Metrics { rmse: mse.sqrt(), mse, mape, nlpd: nlpd / n, n: y.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [1.0, 2.0, 3.0];
        let m = evaluate(&y, &y, &[1.0; 3]).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mape, 0.0);
        assert!((m.nlpd - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor() {
        let y = [1.0, 2.0, 4.0, -1.0];
        let c = 1.5;
        let m = evaluate(&y, &[c; 4], &[2.0; 4]).unwrap();
        let mse = (0.25 + 0.25 + 6.25 + 6.25) / 4.0;
        assert!((m.mse - mse).abs() < 1e-15);
        assert!((m.rmse - mse.sqrt()).abs() < 1e-15);
        let mape = 100.0 * (0.5 + 0.25 + 0.625 + 2.5) / 4.0;
        assert!((m.mape - mape).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_skip_mape() {
        let m = evaluate(&[0.0, 2.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((m.mape - 50.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(evaluate(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }
}
