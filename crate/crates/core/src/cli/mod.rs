//! The `lulc` command line: one subcommand per pipeline stage plus the
//! end-to-end `pipeline`.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::AugmentError;
use crate::eval::EvalError;
use crate::grid::GridError;
use crate::labels::{LabelError, LulcClass};
use crate::net::{NetError, WidthMultiplier};
use crate::raster::RasterError;
use crate::training::{CheckpointError, TrainError, TrainMode};

pub use config::{DatasetPair, FilePairs, PipelineConfig, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config,
    Data,
    Diverged,
    Io,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Config => 2,
            ExitKind::Data => 3,
            ExitKind::Diverged => 4,
            ExitKind::Io => 5,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ExitKind::Config => "config",
            ExitKind::Data => "data",
            ExitKind::Diverged => "divergence",
            ExitKind::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { kind: ExitKind::Config, message }
    }

    pub fn data(message: String) -> Self {
        Self { kind: ExitKind::Data, message }
    }

    pub fn io(message: String) -> Self {
        Self { kind: ExitKind::Io, message }
    }
}

/// `error kind=<tag> code=<n>: <message>` on a single line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "error kind={} code={}: {msg}", self.kind.tag(), self.kind.code())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        let kind = match e {
            RasterError::MissingFile(_) | RasterError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Raster(r) => r.into(),
            LabelError::BadThreshold(_) | LabelError::DuplicatePaletteColor(_) | LabelError::UnknownClass(_) => {
                Self::config(e.to_string())
            }
            other => Self::data(other.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::BadConfig(_) => Self::config(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::BadWidth(_) => Self::config(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::IoFailure { .. } => Self::io(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => Self::config(e.to_string()),
            TrainError::Diverged(_) => Self { kind: ExitKind::Diverged, message: e.to_string() },
            TrainError::Net(n) => n.into(),
            TrainError::Raster(r) => r.into(),
            TrainError::Label(l) => l.into(),
            TrainError::Grid(g) => g.into(),
            TrainError::Augment(a) => a.into(),
            other => Self::data(other.to_string()),
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, s.as_bytes())
}

#[derive(Debug, Parser)]
#[command(name = "lulc", version, about = "Per-class land-cover segmentation with FCN-8")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for initialization and shuffling (overrides config and LULC_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate config and inputs, then stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr", allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// One of 1, 0.5, 0.25, 0.125, 0.0625.
    #[arg(long)]
    pub width: Option<f64>,
    /// Disable augmentation in downsample mode.
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainFlags {
    fn settings(&self) -> Result<TrainSettings, CliError> {
        let width_multiplier =
            self.width.map(WidthMultiplier::try_from).transpose().map_err(|e| CliError::config(e.to_string()))?;
        Ok(TrainSettings {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            mode: self.mode,
            width_multiplier,
            augment: self.no_augment.then_some(false),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode ground truth into per-class binary masks.
    Masks {
        #[arg(long)]
        class: Option<LulcClass>,
    },
    /// Select images containing a class and split them into train/test.
    Split {
        #[arg(long)]
        class: LulcClass,
    },
    /// Write the original and every augmentation of one image/mask pair.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Cut an image into 224×224 tiles with a grid sidecar.
    Tile {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = crate::grid::TILE)]
        tile: u32,
    },
    /// Reassemble tiles listed in a grid sidecar.
    Stitch {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Train one class model.
    Train {
        #[arg(long)]
        class: LulcClass,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Predict masks for images with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Defaults to the checkpoint's training mode.
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Score predicted masks against ground-truth masks.
    Evaluate {
        #[arg(long)]
        class: LulcClass,
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long = "truth", required = true)]
        truths: Vec<PathBuf>,
        /// Label stored in the metrics file.
        #[arg(long, default_value = "grid")]
        mode: TrainMode,
    },
    /// Color TP/FN/FP/TN of one prediction.
    Errormap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Tabulate metrics files.
    Report {
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// ecognition, fcn8-downsample or fcn8-grid.
        #[arg(long)]
        reference: Option<String>,
        /// Add a relative accuracy change column.
        #[arg(long)]
        improvement: bool,
        #[arg(long, default_value = "Results on the test set")]
        title: String,
    },
    /// masks → split → (augment) → train → predict → evaluate → report.
    Pipeline {
        #[arg(long)]
        class: LulcClass,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Generate a synthetic dataset with manifest and config.
    Synth {
        /// scenes or presence.
        #[arg(long, default_value = "scenes")]
        kind: String,
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[arg(long, default_value_t = 448)]
        width: u32,
        #[arg(long, default_value_t = 448)]
        height: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Masks { .. } => "masks",
            Command::Split { .. } => "split",
            Command::Augment { .. } => "augment",
            Command::Tile { .. } => "tile",
            Command::Stitch { .. } => "stitch",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Errormap { .. } => "errormap",
            Command::Report { .. } => "report",
            Command::Pipeline { .. } => "pipeline",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Resolved settings shared by every subcommand.
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub dry_run: bool,
    pub threads: usize,
    pub args: Vec<String>,
    pub command: &'static str,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a [String],
    threads: usize,
    seed: u64,
    split_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a crate::training::TrainConfig>,
    config: &'a PipelineConfig,
}

impl Context {
    /// Writes `run-record.json` into `dir`.
    pub fn record(&self, dir: &Path, train: Option<&crate::training::TrainConfig>) -> Result<(), CliError> {
        let rec = RunRecord {
            tool: "lulc",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: &self.args,
            threads: self.threads,
            seed: self.config.seed,
            split_seed: self.config.split.rng_seed,
            train,
            config: &self.config,
        };
        write_json(&dir.join("run-record.json"), &rec)
    }
}

fn context(global: &GlobalArgs, command: &'static str, args: Vec<String>) -> Result<Context, CliError> {
    let mut config = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.apply_env()?;
    if let Some(s) = global.seed {
        config.seed = s;
    }
    if let Some(t) = global.threads {
        config.threads = Some(t);
    }
    if let Some(o) = &global.out {
        config.output_dir = o.clone();
    }
    if config.threads == Some(0) {
        return Err(CliError::config("threads must be at least 1".into()));
    }
    let threads = config.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    // Fails harmlessly if a pool already exists (repeated in-process runs).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(Context { out: config.output_dir.clone(), config, dry_run: global.dry_run, threads, args, command })
}

/// Parses `args`, runs the subcommand, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Config.code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let shown: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, shown) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.kind.code()
        }
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let ctx = context(&cli.global, cli.command.name(), args)?;
    commands::dispatch(&ctx, cli.command)
}
