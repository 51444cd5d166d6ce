use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::encoder::StageFeatures;
use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Parameterized};

/// Unnormalized mask scores, `[1, H, W]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub data: Array3<f64>,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Array2<f64> {
        self.data
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|v| 1.0 / (1.0 + (-v).exp()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width of the fused feature map; each upsampling step halves it.
    pub dim: usize,
    pub min_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            min_dim: 8,
        }
    }
}

/// 2x2 stride-2 transposed convolution on a token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConv {
    /// `[in, 4 * out]`, sub-pixel blocks ordered TL, TR, BL, BR.
    pub weight: Matrix,
    pub bias: Matrix,
}

impl TransposedConv {
    fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, 4 * output), |_| rng.gen_range(-bound..bound)),
            bias: Array2::from_shape_fn((1, output), |_| rng.gen_range(-bound..bound)),
        }
    }

    fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, grid: usize) -> Var {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight, true);
        let b = tape.param(&format!("{prefix}.bias"), &self.bias, true);
        let y = tape.matmul(x, w);
        let y = tape.depth_to_space(y, grid, grid);
        tape.add_row(y, b)
    }
}

/// Mask decoder: lateral projections of every stage summed on the first
/// stage's grid, then learned 2x upsampling back to input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecoder {
    encoder: EncoderConfig,
    config: DecoderConfig,
    pub laterals: Vec<Linear>,
    pub norm: LayerNorm,
    pub ups: Vec<TransposedConv>,
    pub head: Linear,
}

impl MaskDecoder {
    pub fn random(encoder: &EncoderConfig, config: DecoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        if config.dim == 0 || config.min_dim == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let laterals = encoder
            .stage_widths
            .iter()
            .map(|&w| Linear::fan_in_uniform(w, config.dim, &mut rng))
            .collect();
        let steps = encoder.patch_size.trailing_zeros() as usize;
        let mut dims = vec![config.dim];
        for _ in 0..steps {
            let last = *dims.last().unwrap();
            dims.push((last / 2).max(config.min_dim));
        }
        let ups = dims
            .windows(2)
            .map(|p| TransposedConv::random(p[0], p[1], &mut rng))
            .collect();
        let head = Linear::fan_in_uniform(*dims.last().unwrap(), 1, &mut rng);
        Ok(Self {
            encoder: encoder.clone(),
            config,
            laterals,
            norm: LayerNorm::new(config.dim),
            ups,
            head,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn config(&self) -> DecoderConfig {
        self.config
    }

    /// Records the decoder on `tape`; returns logits as `[H*W, 1]`.
    pub fn forward(&self, tape: &mut Tape, features: &[Var]) -> Result<Var> {
        let cfg = &self.encoder;
        if features.len() != cfg.num_stages {
            return Err(Error::Shape(format!(
                "decoder built for {} stages, got {}",
                cfg.num_stages,
                features.len()
            )));
        }
        for (s, &f) in features.iter().enumerate() {
            let want = (cfg.tokens(s), cfg.stage_widths[s]);
            if tape.value(f).dim() != want {
                return Err(Error::Shape(format!(
                    "stage {s} features {:?}, decoder expects {want:?}",
                    tape.value(f).dim()
                )));
            }
        }
        let g0 = cfg.grid(0);
        let mut fused: Option<Var> = None;
        for (s, (&f, lateral)) in features.iter().zip(&self.laterals).enumerate() {
            let mut y = lateral.forward(tape, &format!("decoder.lateral{s}"), f, true);
            if s > 0 {
                y = tape.upsample_nearest(y, cfg.grid(s), cfg.grid(s), g0 / cfg.grid(s));
            }
            fused = Some(match fused {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        let x = fused.expect("at least one stage");
        let x = self.norm.forward(tape, "decoder.norm", x, true);
        let mut x = tape.gelu(x);
        let mut grid = g0;
        for (k, up) in self.ups.iter().enumerate() {
            x = up.forward(tape, &format!("decoder.up{k}"), x, grid);
            x = tape.gelu(x);
            grid *= 2;
        }
        Ok(self.head.forward(tape, "decoder.head", x, true))
    }

    pub fn decode(&self, features: &StageFeatures) -> Result<MaskLogits> {
        let mut tape = Tape::new();
        let vars: Vec<_> = features
            .stages
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect();
        let out = self.forward(&mut tape, &vars)?;
        Ok(self.to_logits(tape.value(out)))
    }

    pub fn to_logits(&self, column: &Matrix) -> MaskLogits {
        let r = self.encoder.input_resolution;
        let data = Array3::from_shape_vec((1, r, r), column.iter().copied().collect())
            .expect("decoder output covers the input grid");
        MaskLogits { data }
    }
}

impl Parameterized for MaskDecoder {
    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (s, l) in self.laterals.iter().enumerate() {
            l.collect(&format!("decoder.lateral{s}"), &mut out);
        }
        self.norm.collect("decoder.norm", &mut out);
        for (k, up) in self.ups.iter().enumerate() {
            out.push((format!("decoder.up{k}.weight"), &up.weight));
            out.push((format!("decoder.up{k}.bias"), &up.bias));
        }
        self.head.collect("decoder.head", &mut out);
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (s, l) in self.laterals.iter_mut().enumerate() {
            l.collect_mut(&format!("decoder.lateral{s}"), &mut out);
        }
        self.norm.collect_mut("decoder.norm", &mut out);
        for (k, up) in self.ups.iter_mut().enumerate() {
            out.push((format!("decoder.up{k}.weight"), &mut up.weight));
            out.push((format!("decoder.up{k}.bias"), &mut up.bias));
        }
        self.head.collect_mut("decoder.head", &mut out);
        out
    }
}
