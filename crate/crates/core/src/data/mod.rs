//! Dataset ingestion.
//!
//! A dataset on disk is described by a [`DatasetSpec`]: where images and
//! masks live relative to the root, how files pair up, and how the splits
//! are laid out. [`build_manifest`] scans the tree once and produces a
//! sorted, serializable [`DatasetManifest`].

mod image;
mod manifest;
pub mod synthetic;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use self::image::{
    decode_labels, instance_to_semantic, load_image, load_mask, preprocess, preprocess_mask,
    resize_bilinear, resize_nearest, save_gray_png,
};
pub use manifest::{
    build_manifest, cache_dir, cached_manifest, load_manifest, save_manifest, DatasetManifest,
    Diagnostic, SampleRecord, CACHE_ENV, MANIFEST_SCHEMA_VERSION,
};

use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// How image and mask files pair up inside one split directory. Directory
/// names may contain `{split}`, replaced by `train` or `test`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Images and masks in sibling directories, matched by file stem.
    PairedDirs { images: String, masks: String },
    /// Images and masks in one directory; a mask's stem is the image stem
    /// followed by `mask_suffix`.
    SuffixPaired { mask_suffix: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitRule {
    /// Each split lives in its own subdirectory of the root.
    Subdirs { train: String, test: String },
    /// The whole root is one split.
    Single { split: Split },
}

/// How mask pixels encode the foreground.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskEncoding {
    /// Two-level masks such as `{0, 255}` or `{0, 1}`.
    #[default]
    Binary,
    /// Integer instance ids with 0 as background.
    Instance,
}

impl MaskEncoding {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Cell => MaskEncoding::Instance,
            _ => MaskEncoding::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub task: Task,
    pub layout: Layout,
    pub split_rule: SplitRule,
}

impl DatasetSpec {
    /// ISTD: `train/train_A` images with `train/train_B` masks, same for test.
    pub fn istd(dataset_id: &str) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            task: Task::Shadow,
            layout: Layout::PairedDirs {
                images: "{split}_A".into(),
                masks: "{split}_B".into(),
            },
            split_rule: SplitRule::Subdirs {
                train: "train".into(),
                test: "test".into(),
            },
        }
    }

    /// `images/` and `masks/` under each of `train/` and `test/`.
    pub fn paired(dataset_id: &str, task: Task) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            task,
            layout: Layout::PairedDirs {
                images: "images".into(),
                masks: "masks".into(),
            },
            split_rule: SplitRule::Subdirs {
                train: "train".into(),
                test: "test".into(),
            },
        }
    }
}

/// A decoded sample ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: crate::guidance::ImageTensor,
    pub mask: crate::metrics::GroundTruthMask,
}

/// Loads and preprocesses every record of `split` at `resolution`.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    resolution: usize,
) -> crate::error::Result<Vec<Sample>> {
    let encoding = MaskEncoding::for_task(manifest.task);
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(Sample {
                sample_id: r.sample_id.clone(),
                image: preprocess(&r.image_path, resolution)?,
                mask: preprocess_mask(&r.mask_path, resolution, encoding)?,
            })
        })
        .collect()
}

pub(crate) fn expand_split(pattern: &str, split: Split) -> PathBuf {
    PathBuf::from(pattern.replace("{split}", split.key()))
}
