use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a hierarchical multi-stage encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_stages: usize,
    pub blocks_per_stage: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub patch_size: usize,
    pub downsample_factor: usize,
    pub input_resolution: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

impl EncoderConfig {
    /// Desk-scale preset: 64x64 input, patch 4, four stages.
    pub fn toy() -> Self {
        Self {
            num_stages: 4,
            blocks_per_stage: vec![2, 2, 2, 2],
            stage_widths: vec![16, 32, 64, 128],
            patch_size: 4,
            downsample_factor: 2,
            input_resolution: 64,
            num_heads: 4,
            mlp_ratio: 4,
            in_channels: 3,
        }
    }

    /// Preset sized for pretrained weights at 1024x1024.
    pub fn full() -> Self {
        Self {
            num_stages: 4,
            blocks_per_stage: vec![2, 2, 6, 2],
            stage_widths: vec![96, 192, 384, 768],
            patch_size: 16,
            downsample_factor: 2,
            input_resolution: 1024,
            num_heads: 4,
            mlp_ratio: 4,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_stages == 0 {
            return bad("num_stages must be at least 1".into());
        }
        if self.blocks_per_stage.len() != self.num_stages
            || self.stage_widths.len() != self.num_stages
        {
            return bad(format!(
                "{} stages but {} block counts and {} widths",
                self.num_stages,
                self.blocks_per_stage.len(),
                self.stage_widths.len()
            ));
        }
        if self.downsample_factor != 2 {
            return bad(format!(
                "only 2x2 patch merging is supported, got downsample factor {}",
                self.downsample_factor
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return bad(format!(
                "patch size {} must be a power of two",
                self.patch_size
            ));
        }
        let stride = self.patch_size * self.downsample_factor.pow(self.num_stages as u32 - 1);
        if self.input_resolution == 0 || self.input_resolution % stride != 0 {
            return bad(format!(
                "resolution {} not divisible by patch * downsample^(stages-1) = {stride}",
                self.input_resolution
            ));
        }
        if self.num_heads == 0 {
            return bad("num_heads must be at least 1".into());
        }
        for (s, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 || w % self.num_heads != 0 {
                return bad(format!(
                    "stage {s} width {w} not divisible by {} heads",
                    self.num_heads
                ));
            }
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        Ok(())
    }

    /// Side length of stage `s`'s token grid.
    pub fn grid(&self, stage: usize) -> usize {
        self.input_resolution / self.patch_size / self.downsample_factor.pow(stage as u32)
    }

    pub fn tokens(&self, stage: usize) -> usize {
        self.grid(stage).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}
