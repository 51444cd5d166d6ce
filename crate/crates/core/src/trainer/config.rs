use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{DecoderConfig, EncoderConfig, Precision};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceWeights, DEFAULT_MASK_RATIO};
use crate::model::ModelConfig;
use crate::task::Task;

/// Encoder size preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

/// Training configuration; one flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub lr0: f64,
    pub batch_size: usize,
    /// Defaults to the task's epoch count.
    pub epochs: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub preset: Preset,
    /// Overrides the preset's input resolution.
    pub resolution: Option<usize>,
    /// Seed of the randomly initialized encoder when no weights are given.
    pub encoder_seed: u64,
    pub encoder_path: Option<PathBuf>,
    /// Fraction of each spectrum axis removed for the high-frequency guidance.
    pub mask_ratio: f64,
    pub bottleneck_dim: usize,
    pub prompt_dim: usize,
    pub decoder_dim: usize,
    pub guidance_weights: Vec<f64>,
    pub guidance_trainable: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: usize,
    /// Global gradient-norm clip; off when absent.
    pub clip_grad_norm: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Cod,
            lr0: 2e-4,
            batch_size: 2,
            epochs: None,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            preset: Preset::Toy,
            resolution: None,
            encoder_seed: 0,
            encoder_path: None,
            mask_ratio: DEFAULT_MASK_RATIO,
            bottleneck_dim: 16,
            prompt_dim: 32,
            decoder_dim: 32,
            guidance_weights: vec![1.0, 1.0],
            guidance_trainable: false,
            checkpoint_interval: 0,
            clip_grad_norm: None,
            precision: Precision::F32,
        }
    }
}

const KEYS: [&str; 22] = [
    "task",
    "lr0",
    "batch_size",
    "epochs",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "preset",
    "resolution",
    "encoder_seed",
    "encoder_path",
    "mask_ratio",
    "bottleneck_dim",
    "prompt_dim",
    "decoder_dim",
    "guidance_weights",
    "guidance_trainable",
    "checkpoint_interval",
    "clip_grad_norm",
    "precision",
];

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(key) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownConfigKey(key.clone()));
        }
        let config: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.task.default_epochs())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == Some(0) {
            return bad("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad("clip_grad_norm must be positive".into());
            }
        }
        if self.bottleneck_dim == 0 || self.prompt_dim == 0 || self.decoder_dim == 0 {
            return bad("adapter and decoder widths must be positive".into());
        }
        self.model_config()?.validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut cfg = match self.preset {
            Preset::Toy => EncoderConfig::toy(),
            Preset::Full => EncoderConfig::full(),
        };
        if let Some(r) = self.resolution {
            cfg.input_resolution = r;
        }
        cfg
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let encoder = self.encoder_config();
        encoder.validate()?;
        Ok(ModelConfig {
            decoder: DecoderConfig {
                dim: self.decoder_dim,
                ..DecoderConfig::default()
            },
            bottleneck_dim: self.bottleneck_dim,
            prompt_dim: self.prompt_dim,
            mask_ratio: self.mask_ratio,
            guidance_weights: GuidanceWeights {
                w: self.guidance_weights.clone(),
                trainable: self.guidance_trainable,
            },
            ..ModelConfig::for_encoder(encoder)
        })
    }

    /// Fields that must agree between a checkpoint and a resumed run.
    pub fn compatible_with(&self, other: &TrainConfig) -> Result<()> {
        let mut a = self.clone();
        let mut b = other.clone();
        // bookkeeping-only fields may change between sessions
        a.checkpoint_interval = 0;
        b.checkpoint_interval = 0;
        a.encoder_path = None;
        b.encoder_path = None;
        if a != b {
            return Err(Error::Config(
                "configuration differs from the checkpoint's snapshot".into(),
            ));
        }
        Ok(())
    }
}
