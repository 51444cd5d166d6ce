use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use super::{build_encoder, LogRecord};
use crate::autograd::Matrix;
use crate::backbone::container::{read_container, write_container, ContainerMetadata};
use crate::backbone::Encoder;
use crate::error::{Error, Result};
use crate::model::SegmentationModel;

const FIRST_MOMENT: &str = "optimizer.m.";
const SECOND_MOMENT: &str = "optimizer.v.";

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SegmentationModel,
    pub optimizer: AdamW,
    /// Number of optimizer steps taken.
    pub step: usize,
    pub history: Vec<LogRecord>,
    /// Hash of the frozen encoder the trainable parameters belong to.
    pub encoder_hash: String,
    pub dataset_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct State {
    kind: String,
    step: usize,
    optimizer_t: u64,
    encoder_hash: String,
    dataset_id: String,
    config: TrainConfig,
    history: Vec<LogRecord>,
}

impl Checkpoint {
    pub fn initial(config: TrainConfig, model: SegmentationModel, dataset_id: &str) -> Self {
        let optimizer = AdamW::new(
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        );
        let encoder_hash = model.encoder_hash();
        Self {
            config,
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
            encoder_hash,
            dataset_id: dataset_id.to_string(),
        }
    }

    /// Adopts a configuration for the next session. Only bookkeeping fields
    /// (checkpoint interval, encoder path) may differ from the snapshot.
    pub fn with_config(mut self, config: &TrainConfig) -> Result<Self> {
        self.config.compatible_with(config)?;
        self.config = config.clone();
        Ok(self)
    }

    /// Writes trainable parameters and optimizer moments at the configured
    /// precision; the frozen encoder is referenced by hash only.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut arrays: Vec<(String, &Matrix)> = self.model.trainable_parameters();
        for (n, m) in &self.optimizer.first_moment {
            arrays.push((format!("{FIRST_MOMENT}{n}"), m));
        }
        for (n, m) in &self.optimizer.second_moment {
            arrays.push((format!("{SECOND_MOMENT}{n}"), m));
        }
        let mut meta = ContainerMetadata::new(self.model.encoder.config().clone());
        meta.extra = serde_json::to_value(State {
            kind: "checkpoint".into(),
            step: self.step,
            optimizer_t: self.optimizer.t,
            encoder_hash: self.encoder_hash.clone(),
            dataset_id: self.dataset_id.clone(),
            config: self.config.clone(),
            history: self.history.clone(),
        })
        .expect("state serializes");
        write_container(path, &arrays, &meta, self.config.precision)
    }
}

/// Reads a checkpoint. The frozen encoder is rebuilt from the stored
/// configuration unless one is supplied; either way its hash must match.
pub fn load_checkpoint(path: &Path, encoder: Option<Encoder>) -> Result<Checkpoint> {
    let (meta, mut arrays) = read_container(path)?;
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let state: State =
        serde_json::from_value(meta.extra.clone()).map_err(|e| malformed(e.to_string()))?;
    if state.kind != "checkpoint" {
        return Err(malformed(format!(
            "container holds `{}`, not a checkpoint",
            state.kind
        )));
    }
    let config = state.config;
    config.validate()?;
    let encoder = match encoder {
        Some(e) => e,
        None => build_encoder(&config)?,
    };
    if encoder.config() != &meta.encoder_config {
        return Err(Error::Config(
            "encoder configuration differs from the checkpoint's".into(),
        ));
    }
    let mut model = SegmentationModel::new(config.model_config()?, encoder, config.seed)?;
    let found = model.encoder_hash();
    if found != state.encoder_hash {
        return Err(Error::EncoderHash {
            expected: state.encoder_hash,
            found,
        });
    }

    let mut optimizer = AdamW::new(
        config.beta1,
        config.beta2,
        config.adam_eps,
        config.weight_decay,
    );
    optimizer.t = state.optimizer_t;
    let mut moments = BTreeMap::new();
    arrays.retain(|name, m| {
        if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
            optimizer.first_moment.insert(n.to_string(), m.clone());
            false
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
            moments.insert(n.to_string(), m.clone());
            false
        } else {
            true
        }
    });
    optimizer.second_moment = moments;

    let mut missing = Vec::new();
    let mut wrong_shape = Vec::new();
    for (name, p) in model.trainable_parameters_mut() {
        match arrays.remove(&name) {
            None => missing.push(name),
            Some(a) if a.dim() != p.dim() => {
                wrong_shape.push(format!("{name} {:?} vs {:?}", a.dim(), p.dim()))
            }
            Some(a) => p.assign(&a),
        }
    }
    let unexpected: Vec<String> = arrays.into_keys().collect();
    if !missing.is_empty() || !wrong_shape.is_empty() || !unexpected.is_empty() {
        return Err(Error::Parameters {
            missing,
            unexpected,
            wrong_shape,
        });
    }
    Ok(Checkpoint {
        config,
        model,
        optimizer,
        step: state.step,
        history: state.history,
        encoder_hash: found,
        dataset_id: state.dataset_id,
    })
}
