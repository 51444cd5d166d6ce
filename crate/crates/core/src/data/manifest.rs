use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{expand_split, DatasetSpec, Layout, Split, SplitRule};
use crate::error::{Error, Result};
use crate::task::Task;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Overrides the directory used by [`cached_manifest`].
pub const CACHE_ENV: &str = "ADAPTERSEG_CACHE";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    pub dataset_id: String,
}

/// A file that could not be paired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub task: Task,
    pub records: Vec<SampleRecord>,
    pub counts: BTreeMap<Split, usize>,
    pub diagnostics: Vec<Diagnostic>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Regular, non-hidden files of `dir`, sorted by name.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Files of `dir` keyed by stem; non-image files become diagnostics.
fn index_by_stem(
    dir: &Path,
    files: Vec<PathBuf>,
    diagnostics: &mut Vec<Diagnostic>,
) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for path in files {
        if !is_image(&path) {
            diagnostics.push(Diagnostic {
                path,
                reason: "unsupported file type".into(),
            });
            continue;
        }
        let s = stem(&path);
        if map.insert(s.clone(), path).is_some() {
            return Err(Error::DuplicateStem {
                stem: s,
                dir: dir.to_path_buf(),
            });
        }
    }
    Ok(map)
}

fn pair_split(
    split_root: &Path,
    split: Split,
    layout: &Layout,
    diagnostics: &mut Vec<Diagnostic>,
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let (images, masks) = match layout {
        Layout::PairedDirs { images, masks } => {
            let img_dir = split_root.join(expand_split(images, split));
            let mask_dir = split_root.join(expand_split(masks, split));
            let images = index_by_stem(&img_dir, list_files(&img_dir)?, diagnostics)?;
            let masks = index_by_stem(&mask_dir, list_files(&mask_dir)?, diagnostics)?;
            (images, masks)
        }
        Layout::SuffixPaired { mask_suffix } => {
            if mask_suffix.is_empty() {
                return Err(Error::Config("mask suffix must not be empty".into()));
            }
            let all = index_by_stem(split_root, list_files(split_root)?, diagnostics)?;
            let mut images = BTreeMap::new();
            let mut masks = BTreeMap::new();
            for (s, path) in all {
                match s.strip_suffix(mask_suffix.as_str()) {
                    Some(base) => {
                        masks.insert(base.to_string(), path);
                    }
                    None => {
                        images.insert(s, path);
                    }
                }
            }
            (images, masks)
        }
    };
    let mut pairs = Vec::new();
    let mut masks = masks;
    for (s, image) in images {
        match masks.remove(&s) {
            Some(mask) => pairs.push((s, image, mask)),
            None => diagnostics.push(Diagnostic {
                path: image,
                reason: "image without mask".into(),
            }),
        }
    }
    for (_, mask) in masks {
        diagnostics.push(Diagnostic {
            path: mask,
            reason: "mask without image".into(),
        });
    }
    Ok(pairs)
}

/// Scans `root` according to `spec`. Unpaired files are reported in the
/// manifest's diagnostics.
pub fn build_manifest(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let splits: Vec<(Split, PathBuf)> = match &spec.split_rule {
        SplitRule::Subdirs { train, test } => vec![
            (Split::Train, root.join(expand_split(train, Split::Train))),
            (Split::Test, root.join(expand_split(test, Split::Test))),
        ],
        SplitRule::Single { split } => vec![(*split, root.to_path_buf())],
    };
    let mut diagnostics = Vec::new();
    let mut records = Vec::new();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for (split, dir) in splits {
        if !dir.is_dir() {
            diagnostics.push(Diagnostic {
                path: dir,
                reason: format!("{split} split directory missing"),
            });
            continue;
        }
        for (sample_id, image_path, mask_path) in
            pair_split(&dir, split, &spec.layout, &mut diagnostics)?
        {
            if let Some(first) = seen.insert(sample_id.clone(), image_path.clone()) {
                return Err(Error::DuplicateStem {
                    stem: sample_id,
                    dir: first.parent().unwrap_or(root).to_path_buf(),
                });
            }
            records.push(SampleRecord {
                sample_id,
                image_path,
                mask_path,
                split,
                dataset_id: spec.dataset_id.clone(),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no image/mask pairs under {}",
            root.display()
        )));
    }
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut counts = BTreeMap::new();
    for r in &records {
        *counts.entry(r.split).or_insert(0) += 1;
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_id: spec.dataset_id.clone(),
        task: spec.task,
        records,
        counts,
        diagnostics,
    })
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(MANIFEST_SCHEMA_VERSION as u64) {
        return Err(Error::Dataset(format!(
            "{}: manifest schema version {:?}, expected {MANIFEST_SCHEMA_VERSION}",
            path.display(),
            version
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Directory for cached manifests: `$ADAPTERSEG_CACHE`, else a directory
/// under the system temp dir.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => std::env::temp_dir().join("adapterseg-cache"),
    }
}

/// Loads the cached manifest for `(root, spec)` when it is still valid,
/// otherwise builds and caches a fresh one.
pub fn cached_manifest(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    let abs = root.canonicalize().map_err(|e| Error::io(root, e))?;
    let mut hasher = Sha256::new();
    hasher.update(abs.to_string_lossy().as_bytes());
    hasher.update(serde_json::to_vec(spec).expect("spec serializes"));
    let key: String = hasher
        .finalize()
        .iter()
        .take(12)
        .map(|b| format!("{b:02x}"))
        .collect();
    let path = cache_dir().join(format!("manifest-{key}.json"));
    if let Ok(m) = load_manifest(&path) {
        let fresh = m
            .records
            .iter()
            .all(|r| r.image_path.is_file() && r.mask_path.is_file());
        if fresh && m.dataset_id == spec.dataset_id && m.task == spec.task {
            log::debug!("using cached manifest {}", path.display());
            return Ok(m);
        }
    }
    let m = build_manifest(&abs, spec)?;
    if let Err(e) = save_manifest(&m, &path) {
        log::warn!("could not cache manifest: {e}");
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"").unwrap();
    }

    #[test]
    fn pairs_sorted_with_orphans_reported() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for s in ["c", "a", "b"] {
            touch(&root.join(format!("train/images/{s}.jpg")));
            touch(&root.join(format!("train/masks/{s}.png")));
        }
        touch(&root.join("train/images/orphan.jpg"));
        touch(&root.join("train/images/notes.txt"));
        let spec = DatasetSpec::paired("toy", Task::Cod);
        let m = build_manifest(root, &spec).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m.count(Split::Train), 3);
        assert_eq!(m.count(Split::Test), 0);
        let reasons: Vec<_> = m.diagnostics.iter().map(|d| d.reason.as_str()).collect();
        assert!(reasons.contains(&"image without mask"));
        assert!(reasons.contains(&"unsupported file type"));
        assert!(reasons.contains(&"test split directory missing"));
        assert_eq!(m, build_manifest(root, &spec).unwrap());
    }

    #[test]
    fn suffix_layout() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["x", "y"] {
            touch(&dir.path().join(format!("{s}.png")));
            touch(&dir.path().join(format!("{s}_mask.png")));
        }
        let spec = DatasetSpec {
            dataset_id: "cells".into(),
            task: Task::Cell,
            layout: Layout::SuffixPaired {
                mask_suffix: "_mask".into(),
            },
            split_rule: SplitRule::Single { split: Split::Test },
        };
        let m = build_manifest(dir.path(), &spec).unwrap();
        assert_eq!(m.count(Split::Test), 2);
        assert!(m.records[0].mask_path.ends_with("x_mask.png"));
    }

    #[test]
    fn empty_and_duplicate_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("train/images")).unwrap();
        fs::create_dir_all(dir.path().join("train/masks")).unwrap();
        let spec = DatasetSpec::paired("e", Task::Polyp);
        assert!(matches!(
            build_manifest(dir.path(), &spec),
            Err(Error::EmptyDataset(_))
        ));

        touch(&dir.path().join("train/images/a.png"));
        touch(&dir.path().join("train/images/a.jpg"));
        touch(&dir.path().join("train/masks/a.png"));
        assert!(matches!(
            build_manifest(dir.path(), &spec),
            Err(Error::DuplicateStem { .. })
        ));
    }

    #[test]
    fn persisted_manifest_round_trips_and_checks_version() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("train/images/a.png"));
        touch(&dir.path().join("train/masks/a.png"));
        let m = build_manifest(dir.path(), &DatasetSpec::paired("rt", Task::Cod)).unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
