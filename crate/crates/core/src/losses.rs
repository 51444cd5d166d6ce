//! Pixelwise training objectives on probabilities.
//!
//! Each loss comes with its analytic gradient with respect to the
//! probabilities; the trainer chains that through the sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the log terms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bce: Option<f64>,
    pub iou: Option<f64>,
    pub balanced_bce: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub terms: LossTerms,
    /// Balanced BCE fell back to plain BCE because one class was absent.
    pub fallback: bool,
}

fn check(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} targets",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("empty prediction".into()));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// d clamp(p) / dp
fn clamp_slope(p: f64) -> f64 {
    if (EPS..=1.0 - EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

fn weighted_bce(p: &[f64], y: &[f64], pos: f64, neg: f64) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = clamp(p);
            pos * y * pc.ln() + neg * (1.0 - y) * (1.0 - pc).ln()
        })
        .sum::<f64>()
        / n
}

fn weighted_bce_grad(p: &[f64], y: &[f64], pos: f64, neg: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = clamp(p);
            -(pos * y / pc - neg * (1.0 - y) / (1.0 - pc)) * clamp_slope(p) / n
        })
        .collect()
}

/// Mean binary cross-entropy.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<LossValue> {
    check(p, y)?;
    let v = weighted_bce(p, y, 1.0, 1.0);
    Ok(LossValue {
        value: v,
        terms: LossTerms {
            bce: Some(v),
            ..Default::default()
        },
        fallback: false,
    })
}

pub fn bce_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check(p, y)?;
    Ok(weighted_bce_grad(p, y, 1.0, 1.0))
}

/// Soft IoU, `1 - sum(p*y) / sum(p + y - p*y)`; zero when both are empty.
pub fn iou_loss(p: &[f64], y: &[f64]) -> Result<LossValue> {
    check(p, y)?;
    let (inter, union) = soft_overlap(p, y);
    let v = if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    };
    Ok(LossValue {
        value: v,
        terms: LossTerms {
            iou: Some(v),
            ..Default::default()
        },
        fallback: false,
    })
}

fn soft_overlap(p: &[f64], y: &[f64]) -> (f64, f64) {
    p.iter().zip(y).fold((0.0, 0.0), |(i, u), (&p, &y)| {
        (i + p * y, u + p + y - p * y)
    })
}

pub fn iou_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check(p, y)?;
    let (inter, union) = soft_overlap(p, y);
    if union == 0.0 {
        return Ok(vec![0.0; p.len()]);
    }
    Ok(y.iter()
        .map(|&y| -(y * union - inter * (1.0 - y)) / (union * union))
        .collect())
}

fn class_weight(y: &[f64]) -> Option<f64> {
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = n - pos;
    (pos > 0.0 && neg > 0.0).then_some(neg / n)
}

/// Class-balanced BCE with `alpha = N_neg / N` on positives and `1 - alpha`
/// on negatives. Falls back to plain BCE when one class is absent.
pub fn balanced_bce_loss(p: &[f64], y: &[f64]) -> Result<LossValue> {
    check(p, y)?;
    match class_weight(y) {
        Some(alpha) => {
            let v = weighted_bce(p, y, alpha, 1.0 - alpha);
            Ok(LossValue {
                value: v,
                terms: LossTerms {
                    balanced_bce: Some(v),
                    ..Default::default()
                },
                fallback: false,
            })
        }
        None => {
            let v = weighted_bce(p, y, 1.0, 1.0);
            Ok(LossValue {
                value: v,
                terms: LossTerms {
                    bce: Some(v),
                    ..Default::default()
                },
                fallback: true,
            })
        }
    }
}

pub fn balanced_bce_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check(p, y)?;
    Ok(match class_weight(y) {
        Some(alpha) => weighted_bce_grad(p, y, alpha, 1.0 - alpha),
        None => weighted_bce_grad(p, y, 1.0, 1.0),
    })
}

/// Loss routed by task: balanced BCE for shadows, BCE + IoU (unit weights)
/// otherwise. Returns the value and its gradient with respect to `p`.
pub fn task_loss(task: Task, p: &[f64], y: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    match task {
        Task::Shadow => Ok((balanced_bce_loss(p, y)?, balanced_bce_grad(p, y)?)),
        Task::Cod | Task::Polyp | Task::Cell => {
            let b = bce_loss(p, y)?;
            let i = iou_loss(p, y)?;
            let grad = bce_grad(p, y)?
                .into_iter()
                .zip(iou_grad(p, y)?)
                .map(|(a, b)| a + b)
                .collect();
            Ok((
                LossValue {
                    value: b.value + i.value,
                    terms: LossTerms {
                        bce: b.terms.bce,
                        iou: i.terms.iou,
                        balanced_bce: None,
                    },
                    fallback: false,
                },
                grad,
            ))
        }
    }
}
