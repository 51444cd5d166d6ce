use serde::{Deserialize, Serialize};

use super::{check_shapes, GroundTruthMask, PredictionMap};
use crate::error::Result;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A score together with whether a degenerate-input convention was used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

/// Pixel counts after binarizing the prediction at `threshold`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(pred: &PredictionMap, gt: &GroundTruthMask, threshold: f64) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p >= threshold, g == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Mean absolute error.
pub fn mae(pred: &PredictionMap, gt: &GroundTruthMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// `(dice, iou)`; both are 1 when prediction and mask are empty.
pub fn dice_iou(pred: &PredictionMap, gt: &GroundTruthMask, threshold: f64) -> Result<(f64, f64)> {
    let c = Confusion::new(pred, gt, threshold)?;
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_)))
}

/// Balanced error rate in percent. A class absent from the mask contributes
/// a rate of 1 and marks the result degenerate.
pub fn ber(pred: &PredictionMap, gt: &GroundTruthMask, threshold: f64) -> Result<Flagged> {
    let c = Confusion::new(pred, gt, threshold)?;
    let rate = |hit: usize, miss: usize| {
        if hit + miss == 0 {
            None
        } else {
            Some(hit as f64 / (hit + miss) as f64)
        }
    };
    let tpr = rate(c.tp, c.fn_);
    let tnr = rate(c.tn, c.fp);
    Ok(Flagged {
        value: 100.0 * (1.0 - 0.5 * (tpr.unwrap_or(1.0) + tnr.unwrap_or(1.0))),
        degenerate: tpr.is_none() || tnr.is_none(),
    })
}

/// Pixelwise F1 of the binarized prediction.
pub fn f1_semantic(pred: &PredictionMap, gt: &GroundTruthMask, threshold: f64) -> Result<f64> {
    let c = Confusion::new(pred, gt, threshold)?;
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(1.0);
    }
    let tp = c.tp as f64;
    let precision = if c.tp + c.fp == 0 {
        0.0
    } else {
        tp / (tp + c.fp as f64)
    };
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        tp / (tp + c.fn_ as f64)
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}
