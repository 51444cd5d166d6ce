//! Acceptance suite: one PASS/FAIL line per criterion.

mod gradients;
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use adapterseg::adapter::{Adapter, AdapterConfig};
use adapterseg::backbone::{DecoderConfig, EncoderConfig, MaskDecoder};
use adapterseg::data::synthetic::{generate, FixtureConfig};
use adapterseg::guidance::{extract_hfc, GuidanceWeights, ImageTensor};
use adapterseg::losses::{
    balanced_bce_grad, balanced_bce_loss, bce_grad, bce_loss, iou_grad, iou_loss, task_loss,
};
use adapterseg::metrics::{MetricKey, MetricReport};
use adapterseg::nn::Parameterized;
use adapterseg::trainer::{
    build_model, cosine_lr, train_samples, LogRecord, RunControl, TrainConfig,
};
use adapterseg::Task;
use adapterseg_cli::table::{measured_row, ReportTable, Source};
use ndarray::Array3;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};

type Outcome = Result<String, String>;

fn ensure(condition: bool, message: impl Into<String>) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message.into())
    }
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let spent = start.elapsed();
    ensure(
        spent < budget,
        format!(
            "took {:.1}s, budget {}s",
            spent.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn adapterseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapterseg"))
        .args(args)
        .output()
        .expect("running the adapterseg binary")
}

fn succeed(args: &[&str]) -> Result<String, String> {
    let out = adapterseg(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`adapterseg {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("log line `{l}`: {e}")))
        .collect()
}

fn read_report(path: &Path) -> Result<MetricReport, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    MetricReport::from_json(&text).map_err(|e| e.to_string())
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let pairs = oracles::exhaustive_binary_three_by_three();
    let worst = oracles::random_maps_match_definition_oracles(1000);
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{pairs} binary 3x3 pairs exact to 1e-12; 1000 random 8x8 maps, max deviation {worst:.1e} (< 1e-9)"
    ))
}

fn trivial_identity() -> Outcome {
    let lowest = oracles::identity_predictions_are_perfect(500);
    Ok(format!(
        "500 random masks, lowest score {lowest}, MAE = BER = 0"
    ))
}

fn mini_encoder() -> EncoderConfig {
    EncoderConfig {
        num_stages: 2,
        blocks_per_stage: vec![1, 1],
        stage_widths: vec![4, 8],
        patch_size: 2,
        downsample_factor: 2,
        input_resolution: 8,
        num_heads: 2,
        mlp_ratio: 2,
        in_channels: 3,
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = gradients::rng(3);
    let mut worst = 0.0f64;
    let mut checked = 0;

    let cfg = AdapterConfig {
        guidance_dim: 6,
        bottleneck_dim: 4,
        prompt_dim: 8,
        stage_widths: vec![8, 4],
    };
    let mut adapter =
        Adapter::new(&cfg, GuidanceWeights::ones(2), 11).map_err(|e| e.to_string())?;
    // move away from the zero initialization so every path carries gradient
    adapter.shared.up.weight = gradients::random_matrix(&mut rng, 4, 8);
    adapter.shared.up.bias = Some(gradients::random_matrix(&mut rng, 1, 8));
    for (stage, width) in [(0, 8), (1, 4)] {
        let guidance = gradients::random_matrix(&mut rng, 5, 6);
        let weights = gradients::random_matrix(&mut rng, 5, width);
        let (w, n) = gradients::check_module(&adapter, &guidance, &weights, |a, t, x| {
            a.forward_stage(t, x, stage).expect("adapter stage")
        });
        worst = worst.max(w);
        checked += n;
    }

    let enc = mini_encoder();
    let decoder = MaskDecoder::random(&enc, DecoderConfig { dim: 8, min_dim: 4 }, 5)
        .map_err(|e| e.to_string())?;
    let stage0 = gradients::random_matrix(&mut rng, enc.tokens(0), 4);
    let stage1 = gradients::random_matrix(&mut rng, enc.tokens(1), 8);
    let weights = gradients::random_matrix(&mut rng, 64, 1);
    let (w, n) = gradients::check_module(&decoder, &stage0, &weights, |d, t, x| {
        let s1 = t.input(stage1.clone());
        d.forward(t, &[x, s1]).expect("decoder forward")
    });
    worst = worst.max(w);
    checked += n;

    let unwrap = |r: adapterseg::Result<f64>| r.expect("loss");
    let losses = [
        gradients::check_loss(
            1,
            |p, y| unwrap(bce_loss(p, y).map(|l| l.value)),
            |p, y| bce_grad(p, y).unwrap(),
        ),
        gradients::check_loss(
            2,
            |p, y| unwrap(balanced_bce_loss(p, y).map(|l| l.value)),
            |p, y| balanced_bce_grad(p, y).unwrap(),
        ),
        gradients::check_loss(
            3,
            |p, y| unwrap(iou_loss(p, y).map(|l| l.value)),
            |p, y| iou_grad(p, y).unwrap(),
        ),
        gradients::check_loss(
            4,
            |p, y| task_loss(Task::Cod, p, y).unwrap().0.value,
            |p, y| task_loss(Task::Cod, p, y).unwrap().1,
        ),
    ];
    for w in losses {
        worst = worst.max(w);
    }
    within(Duration::from_secs(60), start)?;
    ensure(
        worst < 1e-4,
        format!("max relative error {worst:.2e} >= 1e-4"),
    )?;
    Ok(format!(
        "adapter + decoder ({checked} entries) and four losses, max relative error {worst:.2e} (< 1e-4)"
    ))
}

fn toy_fixture(count: usize) -> Vec<adapterseg::data::Sample> {
    generate(&FixtureConfig {
        count,
        ..Default::default()
    })
    .expect("fixture")
}

fn freezing_suite() -> Outcome {
    let config = TrainConfig {
        epochs: Some(25),
        ..TrainConfig::for_task(Task::Cod)
    };
    let samples = toy_fixture(8);
    let before = build_model(&config).map_err(|e| e.to_string())?;

    let image = &samples[0].image;
    let guidance = before.guidance(image).map_err(|e| e.to_string())?;
    let prompts = before.prompts(&guidance).map_err(|e| e.to_string())?;
    let prompted = before
        .encoder
        .encode(image, Some(&prompts))
        .map_err(|e| e.to_string())?;
    let plain = before
        .encoder
        .encode(image, None)
        .map_err(|e| e.to_string())?;
    ensure(
        prompted == plain,
        "zero-initialized prompts changed the encoding",
    )?;

    let after = train_samples(
        &config,
        before.clone(),
        &samples,
        "toy",
        &RunControl::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        after.step == 100,
        format!("ran {} steps, expected 100", after.step),
    )?;
    let bitwise = |a: &[(String, &ndarray::Array2<f64>)], b: &[(String, &ndarray::Array2<f64>)]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|((na, ma), (nb, mb))| {
                na == nb
                    && ma
                        .iter()
                        .zip(mb.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    };
    ensure(
        bitwise(
            &before.encoder.parameters(),
            &after.model.encoder.parameters(),
        ),
        "encoder parameters changed",
    )?;
    let changed = |a: Vec<(String, &ndarray::Array2<f64>)>,
                   b: Vec<(String, &ndarray::Array2<f64>)>| {
        a.iter().zip(&b).filter(|((_, x), (_, y))| x != y).count()
    };
    let adapter_changed = changed(
        before.adapter.parameters(),
        after.model.adapter.parameters(),
    );
    let decoder_changed = changed(
        before.decoder.parameters(),
        after.model.decoder.parameters(),
    );
    ensure(adapter_changed >= 1, "no adapter parameter moved")?;
    ensure(decoder_changed >= 1, "no decoder parameter moved")?;
    Ok(format!(
        "100 steps: encoder bitwise equal, {adapter_changed} adapter and {decoder_changed} decoder tensors moved; zero-prompt encode exact"
    ))
}

fn overfit_experiment() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("toy-overfit");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    let config = manifest_dir().join("data/overfit.toml");

    succeed(&[
        "synth",
        "--out",
        path_str(&data),
        "--count",
        "8",
        "--resolution",
        "64",
    ])?;
    let parsed = TrainConfig::load(&config).map_err(|e| e.to_string())?;
    ensure(
        parsed.lr0 == 2e-4 && parsed.epochs() <= 200 && parsed.task == Task::Polyp,
        "overfit config departs from lr 2e-4 / <= 200 epochs / bce+iou",
    )?;
    succeed(&[
        "train",
        "--config",
        path_str(&config),
        "--dataset",
        path_str(&data),
        "--toy",
        "--out",
        path_str(&run),
    ])?;
    let log = read_log(&run.join("train.jsonl"))?;
    ensure(
        log.iter().all(|r| r.loss.is_finite()),
        "non-finite loss in the log",
    )?;
    succeed(&[
        "eval",
        "--checkpoint",
        path_str(&run.join("final.safetensors")),
        "--dataset",
        path_str(&data),
        "--split",
        "train",
        "--out",
        path_str(&eval),
    ])?;
    let report = read_report(&eval.join("report.json"))?;
    let dice = report.m_dice.ok_or("report has no mDice")?;
    within(Duration::from_secs(600), start)?;
    ensure(dice >= 0.95, format!("train mDice {dice:.4} < 0.95"))?;
    Ok(format!(
        "{} steps, final loss {:.4}, train mDice {dice:.4} (>= 0.95) in {:.0}s",
        log.len(),
        log.last().map_or(f64::NAN, |r| r.loss),
        start.elapsed().as_secs_f64()
    ))
}

fn parameter_efficiency() -> Outcome {
    let enc = EncoderConfig::toy();
    let config = TrainConfig::for_task(Task::Cod);
    let model = build_model(&config).map_err(|e| e.to_string())?;

    let w = &enc.stage_widths;
    let patch_dim = enc.patch_size * enc.patch_size * enc.in_channels;
    let tokens0 = (enc.input_resolution / enc.patch_size).pow(2);
    let block = |w: usize| {
        let r = enc.mlp_ratio;
        2 * w + (3 * w * w + 3 * w) + (w * w + w) + 2 * w + (r * w * w + r * w) + (r * w * w + w)
    };
    let encoder_closed: usize = patch_dim * w[0]
        + w[0]
        + tokens0 * w[0]
        + (0..enc.num_stages)
            .map(|s| enc.blocks_per_stage[s] * block(w[s]))
            .sum::<usize>()
        + (0..enc.num_stages - 1)
            .map(|s| 4 * w[s] * w[s + 1] + w[s + 1])
            .sum::<usize>();
    let g = w[0];
    let (b, p) = (config.bottleneck_dim, config.prompt_dim);
    let adapter_closed = enc.num_stages * (g * b + b) + (b * p + p);

    let encoder_enum = model.encoder.num_parameters();
    let adapter_enum = model.adapter.num_parameters();
    ensure(
        encoder_closed == encoder_enum,
        format!("encoder closed form {encoder_closed} vs enumeration {encoder_enum}"),
    )?;
    ensure(
        adapter_closed == adapter_enum,
        format!("adapter closed form {adapter_closed} vs enumeration {adapter_enum}"),
    )?;
    let ratio = adapter_closed as f64 / encoder_closed as f64;
    ensure(ratio < 0.05, format!("ratio {:.2}% >= 5%", 100.0 * ratio))?;
    Ok(format!(
        "{adapter_closed} adapter / {encoder_closed} encoder parameters = {:.2}% (< 5%)",
        100.0 * ratio
    ))
}

/// Runs the small CLI training used by the schedule and determinism
/// criteria; returns the log of each run.
fn small_cli_runs(runs: usize) -> Result<Vec<(Vec<LogRecord>, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("toy-small");
    succeed(&[
        "synth",
        "--out",
        path_str(&data),
        "--count",
        "4",
        "--seed",
        "3",
    ])?;
    let mut out = Vec::new();
    for k in 0..runs {
        let run = dir.path().join(format!("run{k}"));
        succeed(&[
            "train",
            "--dataset",
            path_str(&data),
            "--task",
            "cod",
            "--toy",
            "--seed",
            "5",
            "--epochs",
            "3",
            "--out",
            path_str(&run),
        ])?;
        let log_path = run.join("train.jsonl");
        let bytes = std::fs::read(&log_path).map_err(|e| e.to_string())?;
        out.push((read_log(&log_path)?, bytes));
    }
    Ok(out)
}

fn schedule_check() -> Outcome {
    let runs = small_cli_runs(1)?;
    let log = &runs[0].0;
    let lr0 = 2e-4;
    let total = log.len();
    ensure(
        total == 6,
        format!("expected 3 epochs x 2 steps, got {total} records"),
    )?;
    let mut worst = 0.0f64;
    for (i, r) in log.iter().enumerate() {
        ensure(r.step == i, format!("record {i} has step {}", r.step))?;
        let expected =
            lr0 * (1.0 + (std::f64::consts::PI * r.step as f64 / total as f64).cos()) / 2.0;
        worst = worst.max((r.lr - expected).abs());
    }
    ensure(worst <= 1e-12, format!("max lr deviation {worst:.2e}"))?;
    ensure(log[0].lr == 2e-4, format!("first lr {}", log[0].lr))?;
    let end = cosine_lr(total, total, lr0).map_err(|e| e.to_string())?;
    ensure(end.abs() <= 1e-12, format!("lr at s = S is {end}"))?;
    Ok(format!(
        "{total} logged steps within {worst:.1e} of the closed form; lr(0) = 2e-4, lr(S) = {end:.1e}"
    ))
}

fn hfc_suite() -> Outcome {
    let max_abs = |a: &Array3<f64>, b: &Array3<f64>| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let mut rng = gradients::rng(8);
    let mut worst = 0.0f64;
    for (c, h, w) in [(3, 16, 16), (1, 7, 9), (3, 64, 64)] {
        let img = ImageTensor::new(Array3::from_shape_fn((c, h, w), |_| {
            rand::Rng::gen_range(&mut rng, 0.0..1.0)
        }))
        .map_err(|e| e.to_string())?;
        let id = extract_hfc(&img, 0.0).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(id.data(), img.data()));
        let gone = extract_hfc(&img, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max(gone.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        // a ratio small enough that only the DC bin is removed
        let dc = extract_hfc(&img, 1.0 / h.max(w) as f64).map_err(|e| e.to_string())?;
        let mut centred = img.data().clone();
        for mut plane in centred.outer_iter_mut() {
            let mean = plane.mean().unwrap();
            plane.mapv_inplace(|v| v - mean);
        }
        worst = worst.max(max_abs(dc.data(), &centred));
    }
    ensure(
        worst <= 1e-5,
        format!("identity/annihilation/DC deviation {worst:.2e}"),
    )?;

    let mut runner = TestRunner::new(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let image = (
        prop_oneof![Just(1usize), Just(3usize)],
        2usize..=12,
        2usize..=12,
    )
        .prop_flat_map(|(c, h, w)| {
            (
                proptest::collection::vec(-1.0f64..1.0, c * h * w),
                proptest::collection::vec(-1.0f64..1.0, c * h * w),
                Just((c, h, w)),
            )
        });
    runner
        .run(
            &(image, -2.0f64..2.0, -2.0f64..2.0, 0.0f64..=1.0),
            |((x, y, shape), a, b, tau)| {
                let to = |v: Vec<f64>| {
                    ImageTensor::new(Array3::from_shape_vec(shape, v).unwrap()).unwrap()
                };
                let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
                let hx = extract_hfc(&to(x), tau).unwrap();
                let hy = extract_hfc(&to(y), tau).unwrap();
                let hc = extract_hfc(&to(combo), tau).unwrap();
                let lin = hx.data() * a + hy.data() * b;
                prop_assert!(max_abs(hc.data(), &lin) <= 1e-9, "linearity");
                let twice = extract_hfc(&hx, tau).unwrap();
                prop_assert!(max_abs(twice.data(), hx.data()) <= 1e-9, "idempotence");
                Ok(())
            },
        )
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "identity/annihilation/DC removal max deviation {worst:.1e} (<= 1e-5); 64 linearity + idempotence cases"
    ))
}

fn determinism() -> Outcome {
    let runs = small_cli_runs(2)?;
    ensure(
        runs[0].1 == runs[1].1,
        "training logs differ between identical seeded runs",
    )?;
    ensure(!runs[0].0.is_empty(), "empty training log")?;
    Ok(format!(
        "two seeded runs, {} identical log records",
        runs[0].0.len()
    ))
}

fn report_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut report_paths = Vec::new();
    for task in Task::ALL {
        let data = dir.path().join(format!("{task}-set"));
        let out = dir.path().join(format!("{task}-report"));
        succeed(&[
            "synth",
            "--out",
            path_str(&data),
            "--split",
            "test",
            "--count",
            "2",
            "--resolution",
            "16",
        ])?;
        succeed(&[
            "eval",
            "--identity",
            "--dataset",
            path_str(&data),
            "--layout",
            "paired",
            "--task",
            task.key(),
            "--out",
            path_str(&out),
        ])?;
        report_paths.push(out.join("report.json"));
    }
    let mut args = vec!["report", "--format", "csv"];
    args.extend(report_paths.iter().map(|p| path_str(p)));
    let csv_text = succeed(&args)?;
    args[2] = "markdown";
    let markdown = succeed(&args)?;

    let shipped = std::fs::read_to_string(manifest_dir().join("data/reference_rows.csv"))
        .map_err(|e| e.to_string())?;
    let mut expected: BTreeMap<(String, String), BTreeMap<MetricKey, String>> = BTreeMap::new();
    for line in shipped.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key: MetricKey = f[3].parse().map_err(|e: adapterseg::Error| e.to_string())?;
        expected
            .entry((f[0].to_string(), f[1].to_string()))
            .or_default()
            .insert(key, f[4].to_string());
    }

    let table = ReportTable::from_csv(&csv_text).map_err(|e| e.to_string())?;
    let references: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.source == Source::Reference)
        .collect();
    ensure(
        references.len() == expected.len(),
        format!(
            "{} reference rows rendered, {} shipped",
            references.len(),
            expected.len()
        ),
    )?;
    for row in &references {
        let want = expected
            .get(&(row.method.clone(), row.dataset.clone()))
            .ok_or_else(|| format!("unexpected reference row {}/{}", row.method, row.dataset))?;
        ensure(
            &row.values == want,
            format!(
                "{}/{} values differ from the shipped file",
                row.method, row.dataset
            ),
        )?;
        let mut cells = format!("| {} | {} | reference |", row.method, row.dataset);
        for k in &table.metrics {
            cells.push_str(&format!(
                " {} |",
                row.values.get(k).map_or("-", String::as_str)
            ));
        }
        ensure(
            markdown.contains(&cells),
            format!("markdown lacks row `{cells}`"),
        )?;
    }

    let measured = report_paths
        .iter()
        .map(|p| read_report(p).map(|r| measured_row("adapterseg", &r)))
        .collect::<Result<Vec<_>, _>>()?;
    let rebuilt = ReportTable::build(measured, None).map_err(|e| e.to_string())?;
    ensure(
        rebuilt == table,
        "CSV output does not round-trip to the in-memory table",
    )?;
    for k in MetricKey::ALL {
        let arrow = if k.higher_is_better() { "↑" } else { "↓" };
        ensure(
            markdown.contains(&format!("{} {arrow}", k.label())),
            format!("missing column {}", k.label()),
        )?;
    }

    let mut bad = vec!["report", "--metrics", "s_alpha,accuracy"];
    bad.push(path_str(&report_paths[0]));
    let rejected = adapterseg(&bad);
    ensure(
        rejected.status.code() == Some(2),
        format!("unknown metric key exit {:?}", rejected.status.code()),
    )?;
    Ok(format!(
        "{} reference rows rendered verbatim with `reference` labels; CSV round-trips; unknown metric key exits 2",
        references.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle suite", metric_oracles),
        ("trivial-identity suite", trivial_identity),
        ("gradient suite", gradient_suite),
        ("freezing suite", freezing_suite),
        ("overfit experiment", overfit_experiment),
        ("parameter efficiency", parameter_efficiency),
        ("schedule check", schedule_check),
        ("HFC suite", hfc_suite),
        ("pipeline determinism", determinism),
        ("report fidelity", report_fidelity),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| name.contains(f.as_str()) || *f == n.to_string())
        {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
