use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use crate::adapter::Prompt;
use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::guidance::{patchify, ImageTensor};
use crate::nn::{LayerNorm, Linear, Parameterized};

/// Per-stage encoder activations, `[tokens_s, width_s]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub stages: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn random(width: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(width),
            qkv: Linear::xavier(width, 3 * width, rng),
            proj: Linear::xavier(width, width, rng),
            norm2: LayerNorm::new(width),
            fc1: Linear::xavier(width, mlp_ratio * width, rng),
            fc2: Linear::xavier(mlp_ratio * width, width, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, heads: usize) -> Var {
        let width = tape.value(x).ncols();
        let head_dim = width / heads;
        let h = self
            .norm1
            .forward(tape, &format!("{prefix}.norm1"), x, false);
        let qkv = self
            .qkv
            .forward(tape, &format!("{prefix}.attn.qkv"), h, false);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let lo = head * head_dim;
            let q = tape.slice_cols(qkv, lo, lo + head_dim);
            let k = tape.slice_cols(qkv, width + lo, width + lo + head_dim);
            let v = tape.slice_cols(qkv, 2 * width + lo, 2 * width + lo + head_dim);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, v));
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let attn_out = self
            .proj
            .forward(tape, &format!("{prefix}.attn.proj"), merged, false);
        let x = tape.add(x, attn_out);

        let h = self
            .norm2
            .forward(tape, &format!("{prefix}.norm2"), x, false);
        let h = self
            .fc1
            .forward(tape, &format!("{prefix}.mlp.fc1"), h, false);
        let h = tape.gelu(h);
        let h = self
            .fc2
            .forward(tape, &format!("{prefix}.mlp.fc2"), h, false);
        tape.add(x, h)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.qkv.collect(&format!("{prefix}.attn.qkv"), out);
        self.proj.collect(&format!("{prefix}.attn.proj"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        self.fc1.collect(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.collect(&format!("{prefix}.mlp.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.norm1.collect_mut(&format!("{prefix}.norm1"), out);
        self.qkv.collect_mut(&format!("{prefix}.attn.qkv"), out);
        self.proj.collect_mut(&format!("{prefix}.attn.proj"), out);
        self.norm2.collect_mut(&format!("{prefix}.norm2"), out);
        self.fc1.collect_mut(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.collect_mut(&format!("{prefix}.mlp.fc2"), out);
    }
}

/// Hierarchical vision transformer: patch embedding, stages of pre-norm
/// blocks, 2x2 patch merging between stages. Its parameters are never
/// trainable; prompts are added at the input of every block of their stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: Matrix,
    pub stages: Vec<Vec<Block>>,
    pub merges: Vec<Linear>,
}

impl Encoder {
    /// Randomly initialized encoder, fully determined by `seed`.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = config.stage_widths[0];
        let patch_embed = Linear::fan_in_uniform(config.patch_dim(), w0, &mut rng);
        let pos_embed = Array2::from_shape_fn((config.tokens(0), w0), |_| rng.gen_range(-0.5..0.5));
        let stages = (0..config.num_stages)
            .map(|s| {
                (0..config.blocks_per_stage[s])
                    .map(|_| Block::random(config.stage_widths[s], config.mlp_ratio, &mut rng))
                    .collect()
            })
            .collect();
        let merges = (0..config.num_stages - 1)
            .map(|s| {
                Linear::xavier(
                    4 * config.stage_widths[s],
                    config.stage_widths[s + 1],
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            stages,
            merges,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub(crate) fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let r = self.config.input_resolution;
        if image.height() != r || image.width() != r || image.channels() != self.config.in_channels
        {
            return Err(Error::Shape(format!(
                "encoder expects {}x{r}x{r} input, got {}x{}x{}",
                self.config.in_channels,
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Records the encoder on `tape`. `prompts`, when given, holds one node
    /// per stage.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &ImageTensor,
        prompts: Option<&[Var]>,
    ) -> Result<Vec<Var>> {
        self.check_image(image)?;
        if let Some(p) = prompts {
            if p.len() != self.config.num_stages {
                return Err(Error::Shape(format!(
                    "{} prompts for {} stages",
                    p.len(),
                    self.config.num_stages
                )));
            }
            for (s, &v) in p.iter().enumerate() {
                let want = (self.config.tokens(s), self.config.stage_widths[s]);
                if tape.value(v).dim() != want {
                    return Err(Error::Shape(format!(
                        "prompt for stage {s} has shape {:?}, expected {want:?}",
                        tape.value(v).dim()
                    )));
                }
            }
        }
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        let x = self
            .patch_embed
            .forward(tape, "encoder.patch_embed", patches, false);
        let pos = tape.param("encoder.pos_embed", &self.pos_embed, false);
        let mut x = tape.add(x, pos);

        let mut outputs = Vec::with_capacity(self.config.num_stages);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let g = self.config.grid(s - 1);
                let merged = tape.space_to_depth(x, g, g);
                x = self.merges[s - 1].forward(tape, &format!("encoder.merge{s}"), merged, false);
            }
            for (b, block) in blocks.iter().enumerate() {
                if let Some(p) = prompts {
                    x = crate::adapter::inject_on_tape(tape, x, p[s]);
                }
                x = block.forward(
                    tape,
                    &format!("encoder.stage{s}.block{b}"),
                    x,
                    self.config.num_heads,
                );
            }
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Runs the frozen encoder, optionally prompted.
    pub fn encode(&self, image: &ImageTensor, prompts: Option<&[Prompt]>) -> Result<StageFeatures> {
        let mut tape = Tape::new();
        let prompt_vars = prompts.map(|ps| {
            ps.iter()
                .map(|p| tape.constant(p.data.clone()))
                .collect::<Vec<_>>()
        });
        let outs = self.forward(&mut tape, image, prompt_vars.as_deref())?;
        Ok(StageFeatures {
            stages: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

impl Parameterized for Encoder {
    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.patch_embed.collect("encoder.patch_embed", &mut out);
        out.push(("encoder.pos_embed".to_string(), &self.pos_embed));
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                self.merges[s - 1].collect(&format!("encoder.merge{s}"), &mut out);
            }
            for (b, block) in blocks.iter().enumerate() {
                block.collect(&format!("encoder.stage{s}.block{b}"), &mut out);
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.patch_embed
            .collect_mut("encoder.patch_embed", &mut out);
        out.push(("encoder.pos_embed".to_string(), &mut self.pos_embed));
        let mut merges = self.merges.iter_mut();
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            if s > 0 {
                merges
                    .next()
                    .expect("one merge per stage boundary")
                    .collect_mut(&format!("encoder.merge{s}"), &mut out);
            }
            for (b, block) in blocks.iter_mut().enumerate() {
                block.collect_mut(&format!("encoder.stage{s}.block{b}"), &mut out);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    pub(crate) fn random_image(cfg: &EncoderConfig, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.input_resolution;
        ImageTensor::new(Array3::from_shape_fn((cfg.in_channels, r, r), |_| {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn toy_token_grids() {
        let cfg = EncoderConfig::toy();
        let enc = Encoder::random(cfg.clone(), 0).unwrap();
        let feats = enc.encode(&random_image(&cfg, 1), None).unwrap();
        let dims: Vec<_> = feats.stages.iter().map(|m| m.dim()).collect();
        assert_eq!(dims, vec![(256, 16), (64, 32), (16, 64), (4, 128)]);
        assert!(feats.stages.iter().all(|m| m.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn zero_prompts_match_unprompted() {
        let cfg = EncoderConfig::toy();
        let enc = Encoder::random(cfg.clone(), 3).unwrap();
        let img = random_image(&cfg, 4);
        let zeros: Vec<_> = (0..cfg.num_stages)
            .map(|s| Prompt {
                data: Array2::zeros((cfg.tokens(s), cfg.stage_widths[s])),
                stage_id: s,
            })
            .collect();
        assert_eq!(
            enc.encode(&img, None).unwrap(),
            enc.encode(&img, Some(&zeros)).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_resolution_and_prompt_count() {
        let cfg = EncoderConfig::toy();
        let enc = Encoder::random(cfg.clone(), 0).unwrap();
        let small = ImageTensor::new(Array3::zeros((3, 32, 32))).unwrap();
        assert!(matches!(enc.encode(&small, None), Err(Error::Shape(_))));
        let one = vec![Prompt {
            data: Array2::zeros((256, 16)),
            stage_id: 0,
        }];
        assert!(enc.encode(&random_image(&cfg, 0), Some(&one)).is_err());
    }

    #[test]
    fn parameter_listing_is_consistent() {
        let mut enc = Encoder::random(EncoderConfig::toy(), 0).unwrap();
        let names: Vec<_> = enc.parameters().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<_> = enc.parameters_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
