//! The assembled segmentation model: guidance extraction, prompt adapters,
//! the frozen encoder and the tunable mask decoder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig, Prompt};
use crate::autograd::{average_pool, Gradients, Matrix, Tape, Var};
use crate::backbone::{DecoderConfig, Encoder, EncoderConfig, MaskDecoder, MaskLogits};
use crate::data::{preprocess, SampleRecord};
use crate::error::{Error, Result};
use crate::guidance::{
    compute_patch_embedding, extract_hfc, GuidanceWeights, ImageTensor, DEFAULT_MASK_RATIO,
};
use crate::losses::{task_loss, LossValue};
use crate::metrics::{GroundTruthMask, PredictionMap, Predictor};
use crate::nn::{parameter_hash, Parameterized};
use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub bottleneck_dim: usize,
    pub prompt_dim: usize,
    /// Fraction of each spectrum axis removed by the high-frequency filter.
    pub mask_ratio: f64,
    pub guidance_weights: GuidanceWeights,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self::for_encoder(EncoderConfig::toy())
    }

    pub fn for_encoder(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            decoder: DecoderConfig::default(),
            bottleneck_dim: 16,
            prompt_dim: 32,
            mask_ratio: DEFAULT_MASK_RATIO,
            guidance_weights: GuidanceWeights::ones(2),
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            guidance_dim: self.encoder.stage_widths[0],
            bottleneck_dim: self.bottleneck_dim,
            prompt_dim: self.prompt_dim,
            stage_widths: self.encoder.stage_widths.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if self.guidance_weights.w.len() != 2 {
            return Err(Error::Config(format!(
                "two guidance weights expected (hfc, patch embedding), got {}",
                self.guidance_weights.w.len()
            )));
        }
        if self.guidance_weights.w.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("guidance weights must be finite".into()));
        }
        Ok(())
    }
}

/// Guidance components of one image for every stage: `[stage][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSet {
    pub stages: Vec<Vec<Matrix>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    config: ModelConfig,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub decoder: MaskDecoder,
}

impl SegmentationModel {
    /// Wraps a frozen `encoder` with freshly initialized adapters and decoder.
    pub fn new(config: ModelConfig, encoder: Encoder, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.config() != &config.encoder {
            return Err(Error::Config(
                "encoder does not match the model configuration".into(),
            ));
        }
        let adapter = Adapter::new(
            &config.adapter_config(),
            config.guidance_weights.clone(),
            seed,
        )?;
        let decoder = MaskDecoder::random(&config.encoder, config.decoder, seed.wrapping_add(1))?;
        Ok(Self {
            config,
            encoder,
            adapter,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.encoder.input_resolution
    }

    /// High-frequency and patch-embedding guidance on the first stage's
    /// grid, average-pooled for every coarser stage.
    pub fn guidance(&self, image: &ImageTensor) -> Result<GuidanceSet> {
        self.encoder.check_image(image)?;
        let cfg = &self.config.encoder;
        let patch = cfg.patch_size;
        let hfc = extract_hfc(image, self.config.mask_ratio)?;
        let f_hfc = compute_patch_embedding(&hfc, patch, &self.encoder.patch_embed)?.data;
        let f_pe = compute_patch_embedding(image, patch, &self.encoder.patch_embed)?.data;
        let g0 = cfg.grid(0);
        let stages = (0..cfg.num_stages)
            .map(|s| {
                let factor = g0 / cfg.grid(s);
                [&f_hfc, &f_pe]
                    .iter()
                    .map(|c| {
                        if factor == 1 {
                            (*c).clone()
                        } else {
                            average_pool(c, g0, g0, factor)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(GuidanceSet { stages })
    }

    fn prompt_vars(&self, tape: &mut Tape, guidance: &GuidanceSet) -> Result<Vec<Var>> {
        if guidance.stages.len() != self.adapter.num_stages() {
            return Err(Error::Shape(format!(
                "guidance for {} stages, adapter has {}",
                guidance.stages.len(),
                self.adapter.num_stages()
            )));
        }
        guidance
            .stages
            .iter()
            .enumerate()
            .map(|(s, comps)| {
                let g = self.adapter.compose_on_tape(tape, comps)?;
                self.adapter.forward_stage(tape, g, s)
            })
            .collect()
    }

    /// Per-stage prompts for an image's guidance.
    pub fn prompts(&self, guidance: &GuidanceSet) -> Result<Vec<Prompt>> {
        let mut tape = Tape::new();
        let vars = self.prompt_vars(&mut tape, guidance)?;
        Ok(vars
            .iter()
            .enumerate()
            .map(|(s, &v)| Prompt {
                data: tape.value(v).clone(),
                stage_id: s,
            })
            .collect())
    }

    /// Records the whole model on `tape`; returns logits as `[H*W, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &ImageTensor,
        guidance: &GuidanceSet,
    ) -> Result<Var> {
        let prompts = self.prompt_vars(tape, guidance)?;
        let features = self.encoder.forward(tape, image, Some(&prompts))?;
        self.decoder.forward(tape, &features)
    }

    pub fn predict_logits(&self, image: &ImageTensor) -> Result<MaskLogits> {
        let guidance = self.guidance(image)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, &guidance)?;
        Ok(self.decoder.to_logits(tape.value(out)))
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<PredictionMap> {
        PredictionMap::new(self.predict_logits(image)?.probabilities())
    }

    /// Adapter and decoder parameters; everything the optimizer may touch.
    pub fn trainable_parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.adapter.parameters();
        out.extend(self.decoder.parameters());
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.adapter.parameters_mut();
        out.extend(self.decoder.parameters_mut());
        out
    }

    pub fn encoder_hash(&self) -> String {
        parameter_hash(&self.encoder.parameters())
    }
}

/// Sigmoid of a logit column, flattened.
pub fn sigmoid_column(logits: &Matrix) -> Vec<f64> {
    logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
}

/// Task loss over the concatenated pixels of a batch, with the gradient with
/// respect to each image's logit column.
pub fn batch_loss(
    task: Task,
    logits: &[&Matrix],
    masks: &[&GroundTruthMask],
) -> Result<(LossValue, Vec<Matrix>)> {
    if logits.len() != masks.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} masks",
            logits.len(),
            masks.len()
        )));
    }
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (l, m) in logits.iter().zip(masks) {
        if l.len() != m.data().len() {
            return Err(Error::Shape(format!(
                "{} logits for a mask of {} pixels",
                l.len(),
                m.data().len()
            )));
        }
        p.extend(sigmoid_column(l));
        y.extend(m.data().iter().copied());
    }
    let (value, dp) = task_loss(task, &p, &y)?;
    let mut seeds = Vec::with_capacity(logits.len());
    let mut offset = 0;
    for l in logits {
        let n = l.len();
        let g: Vec<f64> = (0..n)
            .map(|k| {
                let pk = p[offset + k];
                dp[offset + k] * pk * (1.0 - pk)
            })
            .collect();
        seeds.push(Array2::from_shape_vec(l.dim(), g).expect("same length"));
        offset += n;
    }
    Ok((value, seeds))
}

/// Runs the model over a batch and returns the loss and the gradients of
/// every trainable parameter, summed over the batch.
pub fn loss_and_gradients(
    model: &SegmentationModel,
    task: Task,
    batch: &[(&ImageTensor, &GuidanceSet, &GroundTruthMask)],
) -> Result<(LossValue, Vec<(String, Matrix)>)> {
    let mut tape = Tape::new();
    let mut outs = Vec::with_capacity(batch.len());
    for (image, guidance, _) in batch {
        outs.push(model.forward(&mut tape, image, guidance)?);
    }
    let logits: Vec<&Matrix> = outs.iter().map(|&v| tape.value(v)).collect();
    let masks: Vec<&GroundTruthMask> = batch.iter().map(|b| b.2).collect();
    let (loss, seeds) = batch_loss(task, &logits, &masks)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let seeded: Vec<(Var, Matrix)> = outs.into_iter().zip(seeds).collect();
    let grads: Gradients = tape.backward(&seeded)?;
    Ok((loss, grads.named(&tape)))
}

/// Adapts a model to the dataset evaluation interface.
pub struct ModelPredictor<'a> {
    pub model: &'a SegmentationModel,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, record: &SampleRecord) -> Result<PredictionMap> {
        let image = preprocess(&record.image_path, self.model.resolution())?;
        self.model.predict(&image)
    }
}
