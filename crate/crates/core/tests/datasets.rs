use std::fs;
use std::path::Path;

use adapterseg::data::synthetic::{generate, write_paired, FixtureConfig};
use adapterseg::data::{
    build_manifest, cached_manifest, load_mask, load_split, save_gray_png, DatasetSpec,
    MaskEncoding, SampleRecord, Split, CACHE_ENV,
};
use adapterseg::metrics::{evaluate_dataset, EvalOptions, MetricKey, PredictionMap, Predictor};
use adapterseg::{Result, Task};

fn touch(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, b"").unwrap();
}

#[test]
fn istd_layout_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (split, n) in [("train", 1330), ("test", 540)] {
        for k in 0..n {
            let name = format!("{split}-{k:04}.png");
            touch(
                &dir.path()
                    .join(split)
                    .join(format!("{split}_A"))
                    .join(&name),
            );
            touch(
                &dir.path()
                    .join(split)
                    .join(format!("{split}_B"))
                    .join(&name),
            );
        }
    }
    // shadow-free targets are not part of the segmentation pairs
    touch(&dir.path().join("train/train_C/train-0000.png"));

    let m = build_manifest(dir.path(), &DatasetSpec::istd("istd")).unwrap();
    assert_eq!(m.count(Split::Train), 1330);
    assert_eq!(m.count(Split::Test), 540);
    assert_eq!(m.records.len(), 1870);
    assert!(m.diagnostics.is_empty());
    assert_eq!(m.task, Task::Shadow);
}

struct MaskAsPrediction;

impl Predictor for MaskAsPrediction {
    fn predict(&self, record: &SampleRecord) -> Result<PredictionMap> {
        Ok(load_mask(&record.mask_path, MaskEncoding::Binary)?.to_prediction())
    }
}

#[test]
fn synthetic_fixture_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(&FixtureConfig {
        count: 4,
        resolution: 32,
        ..Default::default()
    })
    .unwrap();
    write_paired(dir.path(), Split::Train, &samples[..3]).unwrap();
    write_paired(dir.path(), Split::Test, &samples[3..]).unwrap();

    let m = build_manifest(dir.path(), &DatasetSpec::paired("syn", Task::Cod)).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (3, 1));
    let loaded = load_split(&m, Split::Train, 32).unwrap();
    for (a, b) in loaded.iter().zip(&samples) {
        assert_eq!(a.sample_id, b.sample_id);
        assert_eq!(a.mask, b.mask);
        // 8-bit PNG quantization
        let diff = (a.image.data() - b.image.data())
            .mapv(f64::abs)
            .fold(0.0f64, |x, &y| x.max(y));
        assert!(diff <= 0.5 / 255.0 + 1e-12, "{diff}");
    }

    let report =
        evaluate_dataset(&MaskAsPrediction, &m, Split::Train, &EvalOptions::default()).unwrap();
    assert_eq!(report.per_image.len(), 3);
    assert!(report.get(MetricKey::SAlpha).unwrap() >= 1.0 - 1e-6);
    assert!(report.get(MetricKey::EPhi).unwrap() >= 1.0 - 1e-6);
    assert!(report.get(MetricKey::FBetaW).unwrap() >= 1.0 - 1e-6);
    assert_eq!(report.get(MetricKey::Mae), Some(0.0));
}

#[test]
fn cell_instance_masks_become_semantic() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("train/images/c0.png");
    let mask = dir.path().join("train/masks/c0.png");
    fs::create_dir_all(image.parent().unwrap()).unwrap();
    fs::create_dir_all(mask.parent().unwrap()).unwrap();
    save_gray_png(&image, 4, 4, vec![128; 16]).unwrap();
    // two instances with labels 1 and 2 and background 0
    let labels = vec![0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 2, 2, 0, 0, 2, 0];
    save_gray_png(&mask, 4, 4, labels.clone()).unwrap();

    let m = build_manifest(dir.path(), &DatasetSpec::paired("cells", Task::Cell)).unwrap();
    assert_eq!(m.diagnostics.len(), 1, "missing test split is reported");
    let s = load_split(&m, Split::Train, 4).unwrap();
    let got: Vec<f64> = s[0].mask.data().iter().copied().collect();
    let want: Vec<f64> = labels
        .iter()
        .map(|&l| if l > 0 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(got, want);
}

#[test]
fn manifests_are_cached_under_the_env_directory() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let samples = generate(&FixtureConfig {
        count: 2,
        resolution: 16,
        ..Default::default()
    })
    .unwrap();
    write_paired(data.path(), Split::Train, &samples).unwrap();
    std::env::set_var(CACHE_ENV, cache.path());
    let spec = DatasetSpec::paired("cached", Task::Polyp);
    let first = cached_manifest(data.path(), &spec).unwrap();
    let files: Vec<_> = fs::read_dir(cache.path()).unwrap().collect();
    assert_eq!(files.len(), 1);
    assert_eq!(cached_manifest(data.path(), &spec).unwrap(), first);
}
