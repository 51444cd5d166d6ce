//! Segmentation metrics.
//!
//! Threshold-based scores (Dice, IoU, BER, F1) binarize the prediction at
//! `pred >= 0.5`. The saliency-style measures (S-measure, mean E-measure,
//! weighted F-measure) follow the conventions of the widely used MATLAB
//! evaluation toolbox so the numbers are comparable with published tables.

mod region;
mod report;
mod saliency;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use region::{ber, dice_iou, f1_semantic, mae, Confusion, Flagged, DEFAULT_THRESHOLD};
pub use report::{
    evaluate_dataset, evaluate_image, evaluate_pairs, EvalOptions, Exclusion, ImageMetrics,
    MetricKey, MetricReport, Predictor,
};
pub use saliency::{
    e_measure, e_measure_mean, s_measure, weighted_f_beta, EMeasureMode, E_THRESHOLDS,
};

/// Prediction after the sigmoid, `[H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    data: Array2<f64>,
}

impl PredictionMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("prediction has zero extent".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction"));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "prediction values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Binary ground truth, `[H, W]` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    data: Array2<f64>,
}

impl GroundTruthMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("mask has zero extent".into()));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn from_bools(data: &Array2<bool>) -> Result<Self> {
        Self::new(data.mapv(|b| if b { 1.0 } else { 0.0 }))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// The mask as a prediction, for identity checks.
    pub fn to_prediction(&self) -> PredictionMap {
        PredictionMap {
            data: self.data.clone(),
        }
    }
}

fn check_shapes(pred: &PredictionMap, gt: &GroundTruthMask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}
