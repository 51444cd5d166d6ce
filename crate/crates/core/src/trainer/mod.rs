//! Optimization loop: AdamW on the adapter and decoder parameters with a
//! per-step cosine schedule, seeded shuffling and resumable checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, Checkpoint};
pub use config::{Preset, TrainConfig};
pub use optim::{clip_grad_norm, cosine_lr, AdamW};

use crate::backbone::{load_pretrained_encoder, Encoder, FORMAT_VERSION};
use crate::data::{load_split, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::metrics::{dice_iou, DEFAULT_THRESHOLD};
use crate::model::{loss_and_gradients, SegmentationModel};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms,
}

/// Where a run writes its artifacts and when it stops.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// JSON-lines log, appended to.
    pub log_path: Option<PathBuf>,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many total steps, keeping the full schedule.
    pub stop_at: Option<usize>,
    /// Validate inputs and return the initial state without stepping.
    pub dry_run: bool,
}

/// Builds the frozen encoder a configuration asks for: loaded weights when
/// a path is given, otherwise the seeded random encoder.
pub fn build_encoder(config: &TrainConfig) -> Result<Encoder> {
    let cfg = config.encoder_config();
    match &config.encoder_path {
        Some(path) => load_pretrained_encoder(path, FORMAT_VERSION, &cfg),
        None => Encoder::random(cfg, config.encoder_seed),
    }
}

/// Fresh model for a configuration.
pub fn build_model(config: &TrainConfig) -> Result<SegmentationModel> {
    config.validate()?;
    SegmentationModel::new(config.model_config()?, build_encoder(config)?, config.seed)
}

/// Steps per epoch and in total.
pub fn schedule_length(config: &TrainConfig, samples: usize) -> (usize, usize) {
    let per_epoch = samples.div_ceil(config.batch_size);
    (per_epoch, per_epoch * config.epochs())
}

/// Sample order of one epoch; depends only on the seed and epoch index.
pub fn epoch_order(seed: u64, epoch: usize, samples: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains on the manifest's train split.
pub fn train(
    config: &TrainConfig,
    model: SegmentationModel,
    manifest: &DatasetManifest,
    control: &RunControl,
) -> Result<Checkpoint> {
    if manifest.task != config.task {
        return Err(Error::Config(format!(
            "dataset {} is a {} dataset, configuration trains {}",
            manifest.dataset_id, manifest.task, config.task
        )));
    }
    let samples = load_split(manifest, Split::Train, model.resolution())?;
    train_samples(config, model, &samples, &manifest.dataset_id, control)
}

/// Trains on in-memory samples.
pub fn train_samples(
    config: &TrainConfig,
    model: SegmentationModel,
    samples: &[Sample],
    dataset_id: &str,
    control: &RunControl,
) -> Result<Checkpoint> {
    config.validate()?;
    if model.config() != &config.model_config()? {
        return Err(Error::Config(
            "model does not match the training configuration".into(),
        ));
    }
    let state = Checkpoint::initial(config.clone(), model, dataset_id);
    run(state, samples, control)
}

/// Continues a checkpointed run on the manifest's train split.
pub fn resume(
    checkpoint: Checkpoint,
    manifest: &DatasetManifest,
    control: &RunControl,
) -> Result<Checkpoint> {
    if checkpoint.dataset_id != manifest.dataset_id {
        return Err(Error::Dataset(format!(
            "checkpoint was trained on {}, not {}",
            checkpoint.dataset_id, manifest.dataset_id
        )));
    }
    let samples = load_split(manifest, Split::Train, checkpoint.model.resolution())?;
    resume_samples(checkpoint, &samples, &manifest.dataset_id, control)
}

/// Continues a checkpointed run on in-memory samples.
pub fn resume_samples(
    checkpoint: Checkpoint,
    samples: &[Sample],
    dataset_id: &str,
    control: &RunControl,
) -> Result<Checkpoint> {
    if checkpoint.dataset_id != dataset_id {
        return Err(Error::Dataset(format!(
            "checkpoint was trained on {}, not {dataset_id}",
            checkpoint.dataset_id
        )));
    }
    let found = checkpoint.model.encoder_hash();
    if found != checkpoint.encoder_hash {
        return Err(Error::EncoderHash {
            expected: checkpoint.encoder_hash.clone(),
            found,
        });
    }
    run(checkpoint, samples, control)
}

fn run(mut state: Checkpoint, samples: &[Sample], control: &RunControl) -> Result<Checkpoint> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let res = state.model.resolution();
    for s in samples {
        if s.image.height() != res || s.image.width() != res || s.mask.dim() != (res, res) {
            return Err(Error::Shape(format!(
                "sample {} is not {res}x{res}",
                s.sample_id
            )));
        }
    }
    if control.dry_run {
        return Ok(state);
    }
    let config = state.config.clone();
    let (per_epoch, total) = schedule_length(&config, samples.len());
    let stop = control.stop_at.unwrap_or(total).min(total);
    let mut log = match &control.log_path {
        Some(p) => {
            let f = File::options()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), BufWriter::new(f)))
        }
        None => None,
    };
    let guidance: Vec<_> = samples
        .iter()
        .map(|s| state.model.guidance(&s.image))
        .collect::<Result<_>>()?;

    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < stop {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, samples.len());
            order_epoch = epoch;
        }
        let start = (step % per_epoch) * config.batch_size;
        let end = (start + config.batch_size).min(samples.len());
        let batch: Vec<_> = order[start..end]
            .iter()
            .map(|&i| (&samples[i].image, &guidance[i], &samples[i].mask))
            .collect();
        let lr = cosine_lr(step, total, config.lr0)?;
        let (loss, mut grads) = match loss_and_gradients(&state.model, config.task, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        if !loss.value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(max) = config.clip_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        state
            .optimizer
            .step(state.model.trainable_parameters_mut(), &grads, lr)?;
        state.step += 1;
        let record = LogRecord {
            step,
            lr,
            loss: loss.value,
            terms: loss.terms,
        };
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::debug!("step {step} lr {lr:.3e} loss {:.6}", loss.value);
        state.history.push(record);
        if let Some(dir) = &control.checkpoint_dir {
            if config.checkpoint_interval > 0
                && state.step % config.checkpoint_interval == 0
                && state.step < stop
            {
                state.save(&dir.join(format!("step-{:06}.safetensors", state.step)))?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = &control.checkpoint_dir {
        state.save(&final_checkpoint_path(dir))?;
    }
    Ok(state)
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.safetensors")
}

/// Mean per-image Dice of the model on `samples` at threshold 0.5.
pub fn mean_dice(model: &SegmentationModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = model.predict(&s.image)?;
        total += dice_iou(&pred, &s.mask, DEFAULT_THRESHOLD)?.0;
    }
    Ok(total / samples.len() as f64)
}
