//! The `adapterseg` command line: training, evaluation, report tables and
//! guidance debugging on top of the `adapterseg` library.

pub mod exit;
pub mod table;

use std::fs;
use std::path::{Path, PathBuf};

use adapterseg::data::synthetic::{generate, write_paired, FixtureConfig};
use adapterseg::data::{
    cached_manifest, load_image, load_mask, save_gray_png, DatasetManifest, DatasetSpec,
    MaskEncoding, SampleRecord, Split,
};
use adapterseg::guidance::{extract_hfc, to_gray8};
use adapterseg::metrics::{
    evaluate_dataset, EvalOptions, MetricKey, MetricReport, PredictionMap, Predictor,
};
use adapterseg::model::ModelPredictor;
use adapterseg::trainer::{
    build_model, final_checkpoint_path, load_checkpoint, resume, train, Checkpoint, RunControl,
    TrainConfig,
};
use adapterseg::Task;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use exit::Failure;
use table::{measured_row, Format, ReportTable};

#[derive(Debug, Parser)]
#[command(
    name = "adapterseg",
    version,
    about = "Prompt-adapter segmentation on a frozen hierarchical encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the adapter and decoder on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the masks themselves) on a dataset split.
    Eval(EvalArgs),
    /// Render evaluation reports beside the stored reference rows.
    Report(ReportArgs),
    /// Write the high-frequency component of an image as 8-bit grayscale.
    HfcDump(HfcArgs),
    /// Write a synthetic camouflage-style dataset split.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    /// `train|test/images` and `train|test/masks`.
    Paired,
    /// `train/train_A`, `train/train_B`, `test/test_A`, `test/test_B`.
    Istd,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset root directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory layout; shadow datasets default to `istd`, others to `paired`.
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with TrainConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub task: Option<Task>,
    /// Use the desk-scale encoder preset.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override any configuration key, e.g. `--set decoder_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validate configuration, dataset and model without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Defaults to the checkpoint's task.
    #[arg(long, required_unless_present = "checkpoint")]
    pub task: Option<Task>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score the ground-truth masks as predictions instead of running a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub identity: bool,
    /// Output directory for report.txt, report.json and per_image.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
    /// Comma-separated metric keys to show; defaults to every metric of the reports' tasks.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Method name of the measured rows.
    #[arg(long, default_value = "adapterseg")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct HfcArgs {
    pub image: PathBuf,
    /// Fraction of each spectrum axis removed around the DC term.
    #[arg(long, default_value_t = 0.25)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root; samples go to `<out>/<split>/images|masks`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::HfcDump(a) => cmd_hfc_dump(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn dataset_spec(data: &DatasetArgs, task: Task) -> Result<DatasetSpec> {
    let root = data
        .dataset
        .canonicalize()
        .map_err(|e| Failure::data(format!("dataset {}: {e}", data.dataset.display())))?;
    let id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let layout = data.layout.unwrap_or(if task == Task::Shadow {
        LayoutArg::Istd
    } else {
        LayoutArg::Paired
    });
    Ok(match layout {
        LayoutArg::Istd => DatasetSpec {
            task,
            ..DatasetSpec::istd(&id)
        },
        LayoutArg::Paired => DatasetSpec::paired(&id, task),
    })
}

fn load_dataset(data: &DatasetArgs, task: Task) -> Result<DatasetManifest> {
    let spec = dataset_spec(data, task)?;
    let manifest = cached_manifest(&data.dataset, &spec)
        .with_context(|| format!("scanning dataset {}", data.dataset.display()))?;
    for d in &manifest.diagnostics {
        eprintln!("warning: {}: {}", d.path.display(), d.reason);
    }
    Ok(manifest)
}

/// Applies `key=value` overrides through the same parser as config files,
/// so unknown keys and bad values are rejected identically.
pub fn apply_overrides(config: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let mut table: toml::Table = config
        .to_toml_string()
        .parse()
        .context("re-reading configuration")?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override `{item}` is not KEY=VALUE")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), value);
    }
    Ok(TrainConfig::from_toml_str(&toml::to_string(&table)?)?)
}

fn train_config(args: &TrainArgs, checkpoint: Option<&Checkpoint>) -> Result<TrainConfig> {
    let mut config = match (&args.config, checkpoint, args.task) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
            TrainConfig::from_toml_str(&text)
                .with_context(|| format!("config {}", path.display()))?
        }
        (None, Some(ck), _) => ck.config.clone(),
        (None, None, Some(task)) => TrainConfig::for_task(task),
        (None, None, None) => {
            return Err(Failure::config("either --config or --task is required").into())
        }
    };
    if let Some(task) = args.task {
        if args.config.is_some() && task != config.task {
            return Err(Failure::config(format!(
                "--task {task} contradicts the config's task {}",
                config.task
            ))
            .into());
        }
        config.task = task;
    }
    let mut sets = Vec::new();
    if args.toy {
        sets.push("preset=\"toy\"".to_string());
    }
    if let Some(seed) = args.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(epochs) = args.epochs {
        sets.push(format!("epochs={epochs}"));
    }
    sets.extend(args.overrides.iter().cloned());
    apply_overrides(&config, &sets)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let checkpoint = match &args.resume {
        Some(p) => {
            Some(load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let config = train_config(&args, checkpoint.as_ref())?;
    let manifest = load_dataset(&args.data, config.task)?;
    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}-seed{}",
            manifest.dataset_id, config.task, config.seed
        ))
    });
    let log_path = out.join("train.jsonl");

    if args.dry_run {
        let control = RunControl {
            dry_run: true,
            ..Default::default()
        };
        let state = match checkpoint {
            Some(ck) => resume(ck.with_config(&config)?, &manifest, &control)?,
            None => train(&config, build_model(&config)?, &manifest, &control)?,
        };
        println!(
            "dry run ok: {} train samples, {} trainable parameters, step {}",
            manifest.count(Split::Train),
            state
                .model
                .trainable_parameters()
                .iter()
                .map(|(_, m)| m.len())
                .sum::<usize>(),
            state.step
        );
        return Ok(());
    }

    fs::create_dir_all(&out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    let control = RunControl {
        log_path: Some(log_path.clone()),
        checkpoint_dir: Some(out.clone()),
        stop_at: None,
        dry_run: false,
    };
    let state = match checkpoint {
        Some(ck) => resume(ck.with_config(&config)?, &manifest, &control)?,
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path)
                    .with_context(|| format!("replacing {}", log_path.display()))?;
            }
            train(&config, build_model(&config)?, &manifest, &control)?
        }
    };
    if let Some(last) = state.history.last() {
        println!("steps: {} final loss: {:.6}", state.step, last.loss);
    }
    println!("log: {}", log_path.display());
    println!("checkpoint: {}", final_checkpoint_path(&out).display());
    Ok(())
}

struct MaskPredictor {
    encoding: MaskEncoding,
}

impl Predictor for MaskPredictor {
    fn predict(&self, record: &SampleRecord) -> adapterseg::Result<PredictionMap> {
        Ok(load_mask(&record.mask_path, self.encoding)?.to_prediction())
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let checkpoint = match &args.checkpoint {
        Some(p) => {
            Some(load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let task = match (&checkpoint, args.task) {
        (Some(ck), Some(t)) if ck.config.task != t => {
            return Err(Failure::config(format!(
                "checkpoint was trained for {}, not {t}",
                ck.config.task
            ))
            .into())
        }
        (_, Some(t)) => t,
        (Some(ck), None) => ck.config.task,
        (None, None) => {
            return Err(Failure::config("--task is required without a checkpoint").into())
        }
    };
    let manifest = load_dataset(&args.data, task)?;
    let split = Split::from(args.split);
    let options = EvalOptions::default();
    let report = match &checkpoint {
        Some(ck) => evaluate_dataset(
            &ModelPredictor { model: &ck.model },
            &manifest,
            split,
            &options,
        )?,
        None => evaluate_dataset(
            &MaskPredictor {
                encoding: MaskEncoding::for_task(task),
            },
            &manifest,
            split,
            &options,
        )?,
    };
    let out = args.out.unwrap_or_else(|| {
        PathBuf::from("reports").join(format!("{}-{split}", manifest.dataset_id))
    });
    write_report(&report, &out)?;
    println!("{}", report.metric_line());
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, text) in [
        ("report.txt", report.to_key_value()),
        ("report.json", report.to_json()),
        ("per_image.csv", report.per_image_csv()),
    ] {
        let path = out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let metrics = match &args.metrics {
        Some(keys) => Some(
            keys.iter()
                .map(|k| {
                    k.trim()
                        .parse::<MetricKey>()
                        .map_err(|e| Failure::config(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let mut rows = Vec::new();
    for path in &args.reports {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report = MetricReport::from_json(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        rows.push(measured_row(&args.method, &report));
    }
    let format = match args.format {
        FormatArg::Markdown => Format::Markdown,
        FormatArg::Csv => Format::Csv,
    };
    print!("{}", ReportTable::build(rows, metrics)?.render(format)?);
    Ok(())
}

fn cmd_hfc_dump(args: HfcArgs) -> Result<()> {
    let image = load_image(&args.image)?;
    let hfc = extract_hfc(&image, args.tau)?;
    save_gray_png(&args.out, hfc.width(), hfc.height(), to_gray8(&hfc))?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let split = Split::from(args.split);
    let mut samples = generate(&FixtureConfig {
        count: args.count,
        resolution: args.resolution,
        seed: args.seed,
        ..Default::default()
    })?;
    // sample ids must stay unique when both splits share a root
    for (k, s) in samples.iter_mut().enumerate() {
        s.sample_id = format!("{}_{k:03}", split.key());
    }
    write_paired(&args.out, split, &samples)?;
    println!(
        "wrote {} samples to {}",
        samples.len(),
        args.out.join(Split::from(args.split).key()).display()
    );
    Ok(())
}
