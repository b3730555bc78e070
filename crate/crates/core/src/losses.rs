//! Training objectives.
//!
//! Both supervised terms share the deviation-style shape
//! `(1 − y)·|v| + y·max(0, a₀ − v)`: unlabeled samples are pulled toward zero
//! and labeled anomalies are pushed past the margin `a₀`. For the
//! reconstruction error `v = e ≥ 0`, so `|e| = e`. All terms are batch means.
//! Subgradients use 0 at the kinks (`|v|` at 0, the hinge at `v = a₀`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_MARGIN: f64 = 5.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Reconstruction-error term.
    pub error: f64,
    /// Score-deviation term.
    pub deviation: f64,
    /// `deviation + lambda · error`.
    pub total: f64,
    pub margin: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub terms: LossTerms,
    pub dscores: Vec<f64>,
    pub derrors: Vec<f64>,
}

fn check_batch(values: &[f64], labels: &[bool], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    if values.len() != labels.len() {
        return Err(Error::shape(
            "loss labels",
            (values.len(), 1),
            (labels.len(), 1),
        ));
    }
    Ok(())
}

fn margin_loss(
    values: &[f64],
    labels: &[bool],
    margin: f64,
    abs_for_normal: bool,
) -> (f64, Vec<f64>) {
    let n = values.len() as f64;
    let mut total = 0.0;
    let grad = values
        .iter()
        .zip(labels)
        .map(|(&v, &anomalous)| {
            if anomalous {
                let gap = margin - v;
                if gap > 0.0 {
                    total += gap;
                    -1.0 / n
                } else {
                    0.0
                }
            } else if abs_for_normal {
                total += v.abs();
                if v > 0.0 {
                    1.0 / n
                } else if v < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            } else {
                total += v;
                1.0 / n
            }
        })
        .collect();
    (total / n, grad)
}

/// Mean of `(1 − y)·e + y·max(0, a₀ − e)` and its gradient per error.
pub fn error_loss(errors: &[f64], labels: &[bool], margin: f64) -> Result<(f64, Vec<f64>)> {
    check_batch(errors, labels, "error loss")?;
    if let Some(e) = errors.iter().find(|e| e.is_nan() || **e < 0.0) {
        return Err(Error::invalid(format!(
            "reconstruction error must be >= 0, got {e}"
        )));
    }
    Ok(margin_loss(errors, labels, margin, false))
}

/// Mean of `(1 − y)·|s| + y·max(0, a₀ − s)` and its gradient per score.
pub fn deviation_loss(scores: &[f64], labels: &[bool], margin: f64) -> Result<(f64, Vec<f64>)> {
    check_batch(scores, labels, "deviation loss")?;
    Ok(margin_loss(scores, labels, margin, true))
}

/// Root mean squared residual over every entry, with its gradient.
/// A zero residual yields a zero gradient.
pub fn pretrain_loss(residual: &Matrix) -> Result<(f64, Matrix)> {
    if residual.is_empty() {
        return Err(Error::invalid("pretraining loss: empty batch"));
    }
    let count = residual.len() as f64;
    let rmse = (residual.as_slice().iter().map(|v| v * v).sum::<f64>() / count).sqrt();
    let grad = if rmse > 0.0 {
        residual.map(|v| v / (count * rmse))
    } else {
        Matrix::zeros(residual.rows(), residual.cols())
    };
    Ok((rmse, grad))
}

/// Joint objective `L_d + λ·L_e`. When `lambda` is zero the error term is
/// still reported but contributes no gradient.
pub fn joint_loss(
    scores: &[f64],
    errors: &[f64],
    labels: &[bool],
    margin: f64,
    lambda: f64,
) -> Result<JointLoss> {
    if scores.len() != errors.len() {
        return Err(Error::shape(
            "joint loss",
            (scores.len(), 1),
            (errors.len(), 1),
        ));
    }
    let (deviation, dscores) = deviation_loss(scores, labels, margin)?;
    let (error, mut derrors) = error_loss(errors, labels, margin)?;
    for g in &mut derrors {
        *g *= lambda;
    }
    Ok(JointLoss {
        terms: LossTerms {
            error,
            deviation,
            total: deviation + lambda * error,
            margin,
            lambda,
        },
        dscores,
        derrors,
    })
}
