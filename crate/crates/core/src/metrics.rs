//! Point and aggregate accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::data::Timestamp;
use crate::error::{Error, Result};
use crate::numeric::KahanSum;

pub fn abs_error(real: f64, pred: f64) -> f64 {
    (real - pred).abs()
}

/// `|real - pred| / |real|`, or `None` when the real value is zero.
pub fn abs_pct_error(real: f64, pred: f64) -> Option<f64> {
    (real != 0.0).then(|| (real - pred).abs() / real.abs())
}

/// Mean absolute error over `(real, predicted)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("mae of an empty set".into()));
    }
    let mut acc = KahanSum::new();
    for &(r, p) in pairs {
        acc.add(abs_error(r, p));
    }
    Ok(acc.total() / pairs.len() as f64)
}

/// Root mean squared error over `(real, predicted)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("rmse of an empty set".into()));
    }
    let mut acc = KahanSum::new();
    for &(r, p) in pairs {
        let e = r - p;
        acc.add(e * e);
    }
    Ok((acc.total() / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointError {
    pub timestamp: Timestamp,
    pub real: f64,
    pub predicted: f64,
    pub abs_error: f64,
}

/// Aggregate accuracy over the valid predictions of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_point: Option<Vec<PointError>>,
}

impl EvalResult {
    /// Aggregates pairs whose values are both finite.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Ok(Self {
            mae: mae(pairs)?,
            rmse: rmse(pairs)?,
            n: pairs.len(),
            per_point: None,
        })
    }

    /// Aggregates `(timestamp, real, predicted)` triples and keeps them as the
    /// per-point trace.
    pub fn from_points(points: impl IntoIterator<Item = (Timestamp, f64, f64)>) -> Result<Self> {
        let per_point: Vec<PointError> = points
            .into_iter()
            .map(|(timestamp, real, predicted)| PointError {
                timestamp,
                real,
                predicted,
                abs_error: abs_error(real, predicted),
            })
            .collect();
        let pairs: Vec<(f64, f64)> = per_point.iter().map(|p| (p.real, p.predicted)).collect();
        let mut out = Self::from_pairs(&pairs)?;
        out.per_point = Some(per_point);
        Ok(out)
    }

    /// Mean absolute percentage error over points with a nonzero real value.
    pub fn mape(&self) -> Option<f64> {
        let pts = self.per_point.as_ref()?;
        let mut acc = KahanSum::new();
        let mut n = 0usize;
        for p in pts {
            if let Some(e) = abs_pct_error(p.real, p.predicted) {
                acc.add(e);
                n += 1;
            }
        }
        (n > 0).then(|| acc.total() / n as f64)
    }

    pub fn without_points(&self) -> Self {
        Self {
            per_point: None,
            ..self.clone()
        }
    }
}
