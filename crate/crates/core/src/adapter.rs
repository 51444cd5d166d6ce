//! Per-stage prompt generators.
//!
//! Each encoder stage owns a tunable projection of its guidance; a single
//! up-projection shared by all stages maps the activated bottleneck to a
//! common prompt width, and a fixed per-stage aligner resizes that to the
//! stage's channel width:
//!
//! ```text
//! prompt_s = align_s(up(gelu(tune_s(guidance_s))))
//! ```

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceTensor, GuidanceWeights};
use crate::nn::{Linear, Parameterized};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub guidance_dim: usize,
    pub bottleneck_dim: usize,
    pub prompt_dim: usize,
    pub stage_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStage {
    pub stage_id: usize,
    pub tune: Linear,
}

/// The up-projection shared by every stage plus the fixed aligners.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedUpProjection {
    pub up: Linear,
    /// `None` means identity (prompt width equals stage width).
    aligners: Vec<Option<Matrix>>,
}

impl SharedUpProjection {
    pub fn new(up: Linear, stage_widths: &[usize]) -> Self {
        let prompt_dim = up.output_dim();
        let aligners = stage_widths
            .iter()
            .map(|&w| (w != prompt_dim).then(|| channel_resize(prompt_dim, w)))
            .collect();
        Self { up, aligners }
    }

    pub fn aligner(&self, stage: usize) -> Option<&Matrix> {
        self.aligners.get(stage).and_then(|a| a.as_ref())
    }

    pub fn stage_width(&self, stage: usize) -> Option<usize> {
        self.aligners
            .get(stage)
            .map(|a| a.as_ref().map_or(self.up.output_dim(), |m| m.ncols()))
    }
}

/// Linear interpolation along the channel axis, `[from, to]`, endpoints
/// aligned.
pub fn channel_resize(from: usize, to: usize) -> Matrix {
    let mut m = Array2::zeros((from, to));
    for j in 0..to {
        let x = if to == 1 || from == 1 {
            0.0
        } else {
            j as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let i = x.floor() as usize;
        let frac = x - i as f64;
        m[[i, j]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i + 1, j]] += frac;
        }
    }
    m
}

/// Conditioning added to one stage's tokens, `[tokens, stage_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub data: Matrix,
    pub stage_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub stages: Vec<AdapterStage>,
    pub shared: SharedUpProjection,
    /// Mixing weights of the guidance components, `[1, N]`.
    pub mix: Matrix,
    pub mix_trainable: bool,
}

impl Adapter {
    /// Fan-in uniform tuning layers and a zero up-projection, so the prompts
    /// start at exactly zero.
    pub fn new(config: &AdapterConfig, mix: GuidanceWeights, seed: u64) -> Result<Self> {
        if config.guidance_dim == 0 || config.bottleneck_dim == 0 || config.prompt_dim == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..config.stage_widths.len())
            .map(|s| AdapterStage {
                stage_id: s,
                tune: Linear::fan_in_uniform(config.guidance_dim, config.bottleneck_dim, &mut rng),
            })
            .collect();
        let up = Linear::zeros(config.bottleneck_dim, config.prompt_dim);
        if mix.w.is_empty() {
            return Err(Error::Config(
                "at least one guidance weight is required".into(),
            ));
        }
        Ok(Self {
            stages,
            shared: SharedUpProjection::new(up, &config.stage_widths),
            mix: Array2::from_shape_vec((1, mix.w.len()), mix.w).expect("row vector"),
            mix_trainable: mix.trainable,
        })
    }

    pub fn mix_weights(&self) -> GuidanceWeights {
        GuidanceWeights {
            w: self.mix.iter().copied().collect(),
            trainable: self.mix_trainable,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Weighted sum of the guidance components on `tape`; the weights are
    /// differentiable when the mix is trainable.
    pub fn compose_on_tape(&self, tape: &mut Tape, components: &[Matrix]) -> Result<Var> {
        if components.is_empty() {
            return Err(Error::InvalidInput("no guidance components".into()));
        }
        if components.len() != self.mix.ncols() {
            return Err(Error::Shape(format!(
                "{} guidance components for {} weights",
                components.len(),
                self.mix.ncols()
            )));
        }
        let weights = self
            .mix_trainable
            .then(|| tape.param("adapter.guidance_weights", &self.mix, true));
        let mut acc: Option<Var> = None;
        for (j, c) in components.iter().enumerate() {
            let cv = tape.constant(c.clone());
            let term = match weights {
                Some(w) => {
                    let wj = tape.slice_cols(w, j, j + 1);
                    tape.scale_by(cv, wj)
                }
                None => tape.scale(cv, self.mix[[0, j]]),
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        Ok(acc.unwrap())
    }

    /// Records one stage's prompt on `tape`.
    pub fn forward_stage(&self, tape: &mut Tape, guidance: Var, stage: usize) -> Result<Var> {
        let st = self
            .stages
            .get(stage)
            .ok_or_else(|| Error::Shape(format!("no adapter for stage {stage}")))?;
        forward_on_tape(tape, guidance, st, &self.shared)
    }
}

fn forward_on_tape(
    tape: &mut Tape,
    guidance: Var,
    stage: &AdapterStage,
    shared: &SharedUpProjection,
) -> Result<Var> {
    let dim = tape.value(guidance).ncols();
    if dim != stage.tune.input_dim() {
        return Err(Error::Shape(format!(
            "guidance width {dim}, stage {} expects {}",
            stage.stage_id,
            stage.tune.input_dim()
        )));
    }
    if stage.tune.output_dim() != shared.up.input_dim() {
        return Err(Error::Shape(format!(
            "bottleneck {} does not feed up-projection input {}",
            stage.tune.output_dim(),
            shared.up.input_dim()
        )));
    }
    let s = stage.stage_id;
    let h = stage
        .tune
        .forward(tape, &format!("adapter.stage{s}.tune"), guidance, true);
    let h = tape.gelu(h);
    let p = shared.up.forward(tape, "adapter.shared_up", h, true);
    Ok(match shared.aligner(s) {
        Some(a) => {
            let av = tape.constant(a.clone());
            tape.matmul(p, av)
        }
        None => p,
    })
}

/// Prompt for one stage from its guidance.
pub fn adapter_forward(
    guidance: &GuidanceTensor,
    stage: &AdapterStage,
    shared: &SharedUpProjection,
) -> Result<Prompt> {
    if guidance.stage_id != stage.stage_id {
        return Err(Error::Shape(format!(
            "guidance for stage {} given to adapter stage {}",
            guidance.stage_id, stage.stage_id
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(guidance.data.clone());
    let p = forward_on_tape(&mut tape, g, stage, shared)?;
    Ok(Prompt {
        data: tape.value(p).clone(),
        stage_id: stage.stage_id,
    })
}

/// Adds the prompt to a stage's tokens.
pub fn inject_prompt(features: &Matrix, prompt: &Prompt) -> Result<Matrix> {
    if features.dim() != prompt.data.dim() {
        return Err(Error::Shape(format!(
            "features {:?} vs prompt {:?}",
            features.dim(),
            prompt.data.dim()
        )));
    }
    Ok(features + &prompt.data)
}

pub(crate) fn inject_on_tape(tape: &mut Tape, features: Var, prompt: Var) -> Var {
    tape.add(features, prompt)
}

impl Parameterized for Adapter {
    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for st in &self.stages {
            st.tune
                .collect(&format!("adapter.stage{}.tune", st.stage_id), &mut out);
        }
        self.shared.up.collect("adapter.shared_up", &mut out);
        if self.mix_trainable {
            out.push(("adapter.guidance_weights".to_string(), &self.mix));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            st.tune
                .collect_mut(&format!("adapter.stage{}.tune", st.stage_id), &mut out);
        }
        self.shared.up.collect_mut("adapter.shared_up", &mut out);
        if self.mix_trainable {
            out.push(("adapter.guidance_weights".to_string(), &mut self.mix));
        }
        out
    }
}
