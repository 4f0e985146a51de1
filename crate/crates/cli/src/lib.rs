//! `videopose` command-line surface.

pub mod bench;
pub mod eval;
pub mod plot;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;
use videopose_core::data::{generate_synthetic_dataset, load_dataset, DataError, Dataset, SceneSpec};
use videopose_core::metrics::MetricsError;
use videopose_core::objects::ObjectsError;
use videopose_model::train::{resume, train, ModelPreset, TrainConfig};
use videopose_model::{ModelError, TemporalVariant};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ObjectsError> for CliError {
    fn from(e: ObjectsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "videopose", version, about = "Temporal 6D pose estimation on synthetic video")]
pub struct Cli {
    /// Seed for generation, initialization and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with training settings (fields of the training configuration).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict poses over evaluation clips and report ADD / ADD-S AUC.
    Eval(eval::EvalArgs),
    /// Accuracy-vs-threshold curves from a predictions file.
    Plot(plot::PlotArgs),
    /// Per-frame timing of a temporal variant.
    Bench(bench::BenchArgs),
    /// Accuracy at fixed positions inside long clips.
    Keyframe(eval::KeyframeArgs),
    /// Overlay predicted and ground-truth model points on frames.
    Render(render::RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (TOML or JSON). Without it the built-in desk scene is used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 20)]
    pub videos: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// baseline_rnn, convgru or none.
    #[arg(long)]
    pub variant: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Reads a structured-text file as TOML or JSON depending on its extension.
pub fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn open_dataset(root: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(root)?)
}

/// Training configuration from `--config`, then `--seed`.
pub fn train_config(cli: &Cli) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => read_structured(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_variant(s: &str) -> CliResult<TemporalVariant> {
    s.parse().map_err(|e: ModelError| CliError::Usage(e.to_string()))
}

pub fn parse_preset(s: &str) -> CliResult<ModelPreset> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown preset `{s}` (standard, toy or desk)")))
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> CliResult<()> {
    let mut spec: SceneSpec = match &args.spec {
        Some(p) if !p.exists() => {
            return Err(CliError::Data(format!("{}: scene spec not found", p.display())));
        }
        Some(p) => read_structured(p)?,
        None => SceneSpec::desk(args.width, args.height, args.frames, args.videos),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let info = generate_synthetic_dataset(&spec, spec.seed, &args.out, !cli.serial)?;
    write_json(&args.out.join("scene.json"), &spec)?;
    println!(
        "{}",
        serde_json::json!({"dataset": info.name, "videos": info.videos.len(), "frames_per_video": spec.frames, "out": args.out})
    );
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let mut cfg = train_config(cli)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(v) = &args.variant {
        cfg.temporal = parse_variant(v)?;
    }
    let ds = open_dataset(&args.data)?;
    write_json(&args.out.join("train_config.json"), &cfg)?;
    let outcome = match &args.resume {
        Some(ck) => resume(ck, &cfg, &ds, &args.out)?,
        None => train(&cfg, &ds, &args.out)?,
    };
    let last = outcome.history.last();
    println!(
        "{}",
        serde_json::json!({
            "epochs": last.map(|r| r.epoch),
            "final_loss": last.map(|r| r.loss.total),
            "val_add_s_auc": last.and_then(|r| r.val_add_s_auc),
            "best_checkpoint": outcome.best_checkpoint,
            "last_checkpoint": outcome.last_checkpoint,
        })
    );
    Ok(())
}

/// Restricts every thread pool to one worker.
pub fn enter_serial_mode() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.serial {
        enter_serial_mode();
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => eval::cmd_eval(cli, a).map(|_| ()),
        Command::Plot(a) => plot::cmd_plot(a).map(|_| ()),
        Command::Bench(a) => bench::cmd_bench(cli, a).map(|_| ()),
        Command::Keyframe(a) => eval::cmd_keyframe(cli, a).map(|_| ()),
        Command::Render(a) => render::cmd_render(a).map(|_| ()),
    }
}
