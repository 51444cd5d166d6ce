//! Camouflage-style synthetic fixtures: low-contrast shapes on textured
//! noise, used for smoke tests and the overfitting experiment.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Split};
use crate::error::{Error, Result};
use crate::guidance::ImageTensor;
use crate::metrics::GroundTruthMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub count: usize,
    pub resolution: usize,
    /// Brightness offset of the object relative to the background.
    pub contrast: f64,
    /// Object radius range as fractions of the resolution.
    pub min_radius: f64,
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            count: 8,
            resolution: 64,
            contrast: 0.15,
            min_radius: 0.22,
            max_radius: 0.375,
            seed: 0,
        }
    }
}

/// Sum of random oriented sinusoids plus pixel noise, roughly in `[0, 1]`.
fn texture(res: usize, rng: &mut impl Rng) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(2.0..8.0) / res as f64;
            (
                angle.cos() * freq,
                angle.sin() * freq,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.05..0.12),
            )
        })
        .collect();
    Array2::from_shape_fn((res, res), |(i, j)| {
        let mut v = 0.5;
        for &(fx, fy, phase, amp) in &waves {
            v += amp * (2.0 * PI * (fx * j as f64 + fy * i as f64) + phase).sin();
        }
        v + rng.gen_range(-0.06..0.06)
    })
}

/// Inside test of a rotated ellipse or a rotated square.
fn shape_mask(res: usize, rng: &mut impl Rng, min_r: f64, max_r: f64) -> Array2<bool> {
    let r = res as f64;
    let a = rng.gen_range(min_r..=max_r) * r;
    let b = rng.gen_range(min_r..=max_r) * r;
    let margin = a.max(b);
    let cy = rng.gen_range(margin..r - margin);
    let cx = rng.gen_range(margin..r - margin);
    let theta = rng.gen_range(0.0..PI);
    let square = rng.gen_bool(0.3);
    let (s, c) = theta.sin_cos();
    Array2::from_shape_fn((res, res), |(i, j)| {
        let dy = i as f64 + 0.5 - cy;
        let dx = j as f64 + 0.5 - cx;
        let u = (c * dx + s * dy) / a;
        let v = (-s * dx + c * dy) / b;
        if square {
            u.abs() <= 0.8 && v.abs() <= 0.8
        } else {
            u * u + v * v <= 1.0
        }
    })
}

/// Generates `config.count` image/mask pairs; identical configs give
/// identical samples.
pub fn generate(config: &FixtureConfig) -> Result<Vec<Sample>> {
    if config.resolution == 0 || config.count == 0 {
        return Err(Error::Config(
            "fixture needs a positive count and resolution".into(),
        ));
    }
    if !(0.0 < config.min_radius
        && config.min_radius <= config.max_radius
        && config.max_radius < 0.5)
    {
        return Err(Error::Config(
            "fixture radii must satisfy 0 < min <= max < 0.5".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let res = config.resolution;
    (0..config.count)
        .map(|k| {
            let mask = shape_mask(res, &mut rng, config.min_radius, config.max_radius);
            let tint: [f64; 3] = [
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.7..1.0),
            ];
            let bg = texture(res, &mut rng);
            let fg = texture(res, &mut rng);
            let mut data = Array3::zeros((3, res, res));
            for ((i, j), &inside) in mask.indexed_iter() {
                let v = if inside {
                    fg[[i, j]] + config.contrast
                } else {
                    bg[[i, j]]
                };
                for (c, t) in tint.iter().enumerate() {
                    data[[c, i, j]] = (v * t).clamp(0.0, 1.0);
                }
            }
            Ok(Sample {
                sample_id: format!("synthetic_{k:03}"),
                image: ImageTensor::new(data)?,
                mask: GroundTruthMask::from_bools(&mask)?,
            })
        })
        .collect()
}

/// Writes samples as 8-bit PNGs under `root/{split}/images` and
/// `root/{split}/masks`.
pub fn write_paired(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let img_dir = root.join(split.key()).join("images");
    let mask_dir = root.join(split.key()).join("masks");
    for dir in [&img_dir, &mask_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let save_err = |path: &Path, e: image::ImageError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    for s in samples {
        let (_, h, w) = s.image.data().dim();
        let d = s.image.data();
        let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let img = if s.image.channels() == 3 {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([to8(d[[0, y, x]]), to8(d[[1, y, x]]), to8(d[[2, y, x]])])
            })
        } else {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let v = to8(d[[0, y as usize, x as usize]]);
                Rgb([v, v, v])
            })
        };
        let path = img_dir.join(format!("{}.png", s.sample_id));
        img.save(&path).map_err(|e| save_err(&path, e))?;
        let (mh, mw) = s.mask.dim();
        let m = s.mask.data();
        let mask = GrayImage::from_fn(mw as u32, mh as u32, |x, y| {
            Luma([if m[[y as usize, x as usize]] == 1.0 {
                255
            } else {
                0
            }])
        });
        let path = mask_dir.join(format!("{}.png", s.sample_id));
        mask.save(&path).map_err(|e| save_err(&path, e))?;
    }
    Ok(())
}
