use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::region::{ber, dice_iou, f1_semantic, mae, DEFAULT_THRESHOLD};
use super::saliency::{e_measure, s_measure, weighted_f_beta, EMeasureMode};
use super::{GroundTruthMask, PredictionMap};
use crate::data::{load_mask, resize_bilinear, DatasetManifest, MaskEncoding, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    SAlpha,
    EPhi,
    FBetaW,
    Mae,
    Ber,
    MDice,
    MIou,
    F1,
}

impl MetricKey {
    pub const ALL: [MetricKey; 8] = [
        MetricKey::SAlpha,
        MetricKey::EPhi,
        MetricKey::FBetaW,
        MetricKey::Mae,
        MetricKey::Ber,
        MetricKey::MDice,
        MetricKey::MIou,
        MetricKey::F1,
    ];

    pub fn key(self) -> &'static str {
        match self {
            MetricKey::SAlpha => "s_alpha",
            MetricKey::EPhi => "e_phi",
            MetricKey::FBetaW => "f_beta_w",
            MetricKey::Mae => "mae",
            MetricKey::Ber => "ber",
            MetricKey::MDice => "m_dice",
            MetricKey::MIou => "m_iou",
            MetricKey::F1 => "f1",
        }
    }

    /// Column heading used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            MetricKey::SAlpha => "S_alpha",
            MetricKey::EPhi => "E_phi",
            MetricKey::FBetaW => "F_beta^w",
            MetricKey::Mae => "MAE",
            MetricKey::Ber => "BER",
            MetricKey::MDice => "mDice",
            MetricKey::MIou => "mIoU",
            MetricKey::F1 => "F1",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKey::Mae | MetricKey::Ber)
    }

    /// Metrics reported for a task.
    pub fn for_task(task: Task) -> &'static [MetricKey] {
        match task {
            Task::Cod => &[
                MetricKey::SAlpha,
                MetricKey::EPhi,
                MetricKey::FBetaW,
                MetricKey::Mae,
            ],
            Task::Shadow => &[MetricKey::Ber],
            Task::Polyp => &[MetricKey::MDice, MetricKey::MIou],
            Task::Cell => &[MetricKey::F1],
        }
    }

    /// Admissible range of the metric.
    pub fn range(self) -> (f64, f64) {
        match self {
            MetricKey::Ber => (0.0, 100.0),
            _ => (0.0, 1.0),
        }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for MetricKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKey::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric key `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub alpha: f64,
    pub beta2: f64,
    pub e_mode: EMeasureMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            alpha: 0.5,
            beta2: 1.0,
            e_mode: EMeasureMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub sample_id: String,
    pub values: BTreeMap<MetricKey, f64>,
    /// Metrics that fell back to a degenerate-input convention.
    pub degenerate: Vec<MetricKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub task: Task,
    pub s_alpha: Option<f64>,
    pub e_phi: Option<f64>,
    pub f_beta_w: Option<f64>,
    pub mae: Option<f64>,
    pub ber: Option<f64>,
    pub m_dice: Option<f64>,
    pub m_iou: Option<f64>,
    pub f1: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
    pub excluded: Vec<Exclusion>,
    pub notes: Vec<String>,
}

/// Metrics of one image for `task`.
pub fn evaluate_image(
    sample_id: &str,
    pred: &PredictionMap,
    gt: &GroundTruthMask,
    task: Task,
    options: &EvalOptions,
) -> Result<ImageMetrics> {
    let mut values = BTreeMap::new();
    let mut degenerate = Vec::new();
    for &key in MetricKey::for_task(task) {
        let v = match key {
            MetricKey::SAlpha => s_measure(pred, gt, options.alpha)?,
            MetricKey::EPhi => e_measure(pred, gt, options.e_mode)?,
            MetricKey::FBetaW => {
                let f = weighted_f_beta(pred, gt, options.beta2)?;
                if f.degenerate {
                    degenerate.push(key);
                }
                f.value
            }
            MetricKey::Mae => mae(pred, gt)?,
            MetricKey::Ber => {
                let b = ber(pred, gt, options.threshold)?;
                if b.degenerate {
                    degenerate.push(key);
                }
                b.value
            }
            MetricKey::MDice => dice_iou(pred, gt, options.threshold)?.0,
            MetricKey::MIou => dice_iou(pred, gt, options.threshold)?.1,
            MetricKey::F1 => f1_semantic(pred, gt, options.threshold)?,
        };
        values.insert(key, v);
    }
    Ok(ImageMetrics {
        sample_id: sample_id.to_string(),
        values,
        degenerate,
    })
}

impl MetricReport {
    /// Aggregates per-image values by arithmetic mean, ordered by sample id.
    pub fn from_images(
        dataset_id: &str,
        task: Task,
        mut per_image: Vec<ImageMetrics>,
        mut excluded: Vec<Exclusion>,
        options: &EvalOptions,
    ) -> Self {
        per_image.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        excluded.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut report = MetricReport {
            dataset_id: dataset_id.to_string(),
            task,
            s_alpha: None,
            e_phi: None,
            f_beta_w: None,
            mae: None,
            ber: None,
            m_dice: None,
            m_iou: None,
            f1: None,
            per_image: Vec::new(),
            excluded,
            notes: Vec::new(),
        };
        for &key in MetricKey::for_task(task) {
            let vals: Vec<f64> = per_image
                .iter()
                .filter_map(|m| m.values.get(&key).copied())
                .collect();
            if !vals.is_empty() {
                report.set(key, Some(vals.iter().sum::<f64>() / vals.len() as f64));
            }
            let degenerate = per_image
                .iter()
                .filter(|m| m.degenerate.contains(&key))
                .count();
            if degenerate > 0 {
                report.notes.push(format!(
                    "{key}: {degenerate} image(s) used the degenerate-input convention"
                ));
            }
        }
        let keys = MetricKey::for_task(task);
        if keys.contains(&MetricKey::MDice) {
            report.notes.push("m_dice, m_iou: per-image mean".into());
        }
        if keys.contains(&MetricKey::EPhi) {
            report.notes.push(match options.e_mode {
                EMeasureMode::Mean => "e_phi: mean over 256 thresholds".into(),
                EMeasureMode::Adaptive => "e_phi: adaptive threshold".into(),
            });
        }
        report.per_image = per_image;
        report
    }

    pub fn get(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::SAlpha => self.s_alpha,
            MetricKey::EPhi => self.e_phi,
            MetricKey::FBetaW => self.f_beta_w,
            MetricKey::Mae => self.mae,
            MetricKey::Ber => self.ber,
            MetricKey::MDice => self.m_dice,
            MetricKey::MIou => self.m_iou,
            MetricKey::F1 => self.f1,
        }
    }

    fn set(&mut self, key: MetricKey, value: Option<f64>) {
        let slot = match key {
            MetricKey::SAlpha => &mut self.s_alpha,
            MetricKey::EPhi => &mut self.e_phi,
            MetricKey::FBetaW => &mut self.f_beta_w,
            MetricKey::Mae => &mut self.mae,
            MetricKey::Ber => &mut self.ber,
            MetricKey::MDice => &mut self.m_dice,
            MetricKey::MIou => &mut self.m_iou,
            MetricKey::F1 => &mut self.f1,
        };
        *slot = value;
    }

    /// Populated aggregate metrics in canonical order.
    pub fn metrics(&self) -> Vec<(MetricKey, f64)> {
        MetricKey::ALL
            .into_iter()
            .filter_map(|k| self.get(k).map(|v| (k, v)))
            .collect()
    }

    /// One metric per line, e.g. `s_alpha = 0.93`.
    pub fn metric_line(&self) -> String {
        self.metrics()
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Flat `key = value` text.
    pub fn to_key_value(&self) -> String {
        let mut out = format!(
            "dataset_id = {}\ntask = {}\nimages = {}\nexcluded = {}\n",
            self.dataset_id,
            self.task,
            self.per_image.len(),
            self.excluded.len()
        );
        for (k, v) in self.metrics() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for n in &self.notes {
            out.push_str(&format!("note = {n}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("malformed report: {e}")))
    }

    /// Per-image values as CSV with columns `sample_id,metric,value`.
    pub fn per_image_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "metric", "value"])
            .expect("in-memory write");
        for m in &self.per_image {
            for (k, v) in &m.values {
                w.write_record([m.sample_id.as_str(), k.key(), &v.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Builds a report from in-memory predictions. Predictions whose shape
/// differs from the mask are resized bilinearly first.
pub fn evaluate_pairs(
    dataset_id: &str,
    task: Task,
    pairs: &[(String, PredictionMap, GroundTruthMask)],
    options: &EvalOptions,
) -> Result<MetricReport> {
    let per_image = pairs
        .iter()
        .map(|(id, pred, gt)| {
            let pred = match_resolution(pred, gt)?;
            evaluate_image(id, &pred, gt, task, options)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(
        dataset_id,
        task,
        per_image,
        Vec::new(),
        options,
    ))
}

fn match_resolution(pred: &PredictionMap, gt: &GroundTruthMask) -> Result<PredictionMap> {
    if pred.dim() == gt.dim() {
        return Ok(pred.clone());
    }
    let (h, w) = gt.dim();
    PredictionMap::new(resize_bilinear(pred.data(), h, w).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Produces a probability map for a dataset sample.
pub trait Predictor {
    fn predict(&self, record: &SampleRecord) -> Result<PredictionMap>;
}

/// Evaluates every record of `split` in sample-id order. Samples whose mask
/// cannot be read are skipped and listed in the report's exclusions.
pub fn evaluate_dataset(
    model: &dyn Predictor,
    manifest: &DatasetManifest,
    split: Split,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let mut records: Vec<&SampleRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no {split} samples",
            manifest.dataset_id
        )));
    }
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let encoding = MaskEncoding::for_task(manifest.task);
    let mut per_image = Vec::new();
    let mut excluded = Vec::new();
    for d in &manifest.diagnostics {
        if d.reason == "image without mask" {
            excluded.push(Exclusion {
                sample_id: d
                    .path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                reason: d.reason.clone(),
            });
        }
    }
    for r in records {
        if !r.mask_path.is_file() {
            excluded.push(Exclusion {
                sample_id: r.sample_id.clone(),
                reason: format!("mask {} missing", r.mask_path.display()),
            });
            continue;
        }
        let gt = load_mask(&r.mask_path, encoding)?;
        let pred = match_resolution(&model.predict(r)?, &gt)?;
        per_image.push(evaluate_image(
            &r.sample_id,
            &pred,
            &gt,
            manifest.task,
            options,
        )?);
    }
    if per_image.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "every {split} sample of {} was excluded",
            manifest.dataset_id
        )));
    }
    Ok(MetricReport::from_images(
        &manifest.dataset_id,
        manifest.task,
        per_image,
        excluded,
        options,
    ))
}
