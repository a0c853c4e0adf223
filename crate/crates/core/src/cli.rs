//! The `dynamixer` command line.
//!
//! Exit codes: 0 success, 1 check failed, 2 config or schema error,
//! 3 missing capability, 4 data error, 5 numeric abort.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{bench_throughput_windows, count_params};
use crate::config::{ModelConfig, PRESET_NAMES};
use crate::data::{DataConfig, DataKind};
use crate::error::Error;
use crate::mixer::{mixing_matrix, model_grad_check, Direction, Model};
use crate::tensor::{Real, Tensor, IS_F64};
use crate::train::{evaluate, train, Checkpoint, TrainConfig, TrainOptions, FINAL_CHECKPOINT, LAST_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAPABILITY: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub const THREADS_ENV: &str = "DYNAMIXER_THREADS";

/// Gradient-check step sizes outside this range are dominated by truncation
/// or rounding error.
pub const GRADCHECK_EPS_RANGE: (f64, f64) = (1e-6, 1e-3);
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Full configuration document: `{ "model": …, "train": …, "data": … }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ConfigFile {
    pub fn preset(name: &str) -> Option<Self> {
        let model = ModelConfig::preset(name)?;
        let train = if name == "tiny" {
            TrainConfig {
                epochs: 16,
                batch_size: 32,
                base_lr: 0.01,
                warmup_epochs: 1,
                max_steps: Some(500),
                ..TrainConfig::default()
            }
        } else {
            TrainConfig {
                epochs: 300,
                batch_size: 128,
                warmup_epochs: 5,
                label_smoothing: 0.1,
                ..TrainConfig::default()
            }
        };
        Some(ConfigFile {
            model,
            train,
            data: DataConfig::default(),
        })
    }

    /// Parse and validate; errors carry the path of the offending key.
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Failure::new(EXIT_CONFIG, format!("config error at `{path}`: {}", e.inner()))
        })?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// An exit code with a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format(_) => EXIT_DATA,
        Error::Numeric(_) | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e.to_string())
    }
}

type CliResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "dynamixer", version, about = "DynaMixer vision-MLP toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Source {
    /// JSON config document.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: dynamixer-s, dynamixer-m, dynamixer-l or tiny.
    #[arg(long)]
    pub preset: Option<String>,
}

impl Source {
    fn resolve(&self) -> Result<Option<ConfigFile>, Failure> {
        match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
                ConfigFile::from_json(&text).map(Some)
            }
            (None, Some(name)) => ConfigFile::preset(name).map(Some).ok_or_else(|| {
                Failure::new(
                    EXIT_CONFIG,
                    format!("unknown preset `{name}` (expected one of {})", PRESET_NAMES.join(", ")),
                )
            }),
            (None, None) => Ok(None),
        }
    }

    fn require(&self) -> Result<ConfigFile, Failure> {
        self.resolve()?
            .ok_or_else(|| Failure::new(EXIT_CONFIG, "one of --config or --preset is required"))
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Override the config's data source.
    #[arg(long, value_enum)]
    pub data: Option<DataChoice>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut DataConfig) {
        if let Some(d) = self.data {
            cfg.kind = match d {
                DataChoice::Synthetic => DataKind::Synthetic,
                DataChoice::Cifar10 => DataKind::Cifar10,
            };
        }
        if let Some(dir) = &self.data_dir {
            cfg.dir = Some(dir.clone());
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataChoice {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    Row,
    Col,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print parameter and MAC counts per component.
    Analyze {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// End-to-end finite-difference gradient check.
    Gradcheck {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Number of parameter coordinates to perturb.
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Train and write metrics.csv, last.ckpt and final.ckpt under --out.
    Train {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Assemble batches on the training thread.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1 accuracy of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validate against this config instead of the checkpoint's own.
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        data: DataArgs,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Eval-mode throughput on random inputs.
    Bench {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Total timing budget across all windows.
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5)]
        windows: usize,
        /// Also write bench.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one mixing matrix as CSV.
    ExportMixing {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text file of C·H·W numbers, or `random:<seed>`.
        #[arg(long)]
        input: String,
        /// Layer index counted across stages.
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long)]
        segment: usize,
        /// Which grid row (or column) of the image.
        #[arg(long, default_value_t = 0)]
        line: usize,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::new(
            EXIT_CONFIG,
            format!("{THREADS_ENV} must be a positive integer, got `{raw}`"),
        )
    })?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::from(Error::io(path, e)))
}

fn cmd_analyze(source: &Source, format: Format) -> CliResult {
    let cfg = source.require()?;
    let report = count_params(&cfg.model)?;
    match format {
        Format::Csv => print!("{}", report.to_csv()),
        Format::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_gradcheck(source: &Source, seed: u64, eps: f64, samples: usize, batch: usize) -> CliResult {
    if !IS_F64 {
        return Err(Failure::new(EXIT_CAPABILITY, "gradcheck requires 64-bit mode"));
    }
    let cfg = source
        .resolve()?
        .unwrap_or_else(|| ConfigFile::preset("tiny").expect("tiny preset"));
    let (lo, hi) = GRADCHECK_EPS_RANGE;
    if !(lo..=hi).contains(&eps) {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!(
                "eps {eps:e} is outside [{lo:e}, {hi:e}]: below it rounding noise swamps the \
                 difference quotient, above it truncation error does"
            ),
        ));
    }
    let report = model_grad_check(&cfg.model, seed, eps as Real, samples, batch.max(1))?;
    println!(
        "max relative error {:.3e} over {} coordinates",
        report.max_rel_err, report.coords_checked
    );
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_CHECK_FAILED,
            format!(
                "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} (worst at {:?})",
                report.max_rel_err, report.worst
            ),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    source: &Source,
    data: &DataArgs,
    out: &Path,
    deterministic: bool,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = source.require()?;
    data.apply(&mut cfg.data);
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.checkpoint_dir = Some(out.to_path_buf());
    cfg.train.validate()?;
    let (train_set, val_set) = cfg.data.load(&cfg.model)?;
    write_file(&out.join("config.json"), &cfg.to_json())?;
    let opts = TrainOptions {
        deterministic,
        data: Some(cfg.data.clone()),
    };
    let report = train(&cfg.model, &cfg.train, &train_set, &val_set, &opts).map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == EXIT_NUMERIC {
            f.message = format!(
                "training aborted: {}; last checkpoint kept at {}",
                f.message,
                out.join(LAST_CHECKPOINT).display()
            );
        }
        f
    })?;
    println!(
        "trained {} steps; final val top-1 {}",
        report.steps, report.final_val_top1
    );
    println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, source: &Source, data: &DataArgs, out: Option<&Path>) -> CliResult {
    let (ck, mut data_cfg) = match source.resolve()? {
        Some(cfg) => (Checkpoint::load_for(checkpoint, &cfg.model)?, cfg.data),
        None => {
            let ck = Checkpoint::load(checkpoint)?;
            let d = ck.data.clone().unwrap_or_default();
            (ck, d)
        }
    };
    data.apply(&mut data_cfg);
    let (_, val_set) = data_cfg.load(&ck.model.config)?;
    let top1 = evaluate(&ck.model, &val_set)?;
    println!("val top-1 {top1}");
    if let Some(dir) = out {
        let json = serde_json::json!({ "checkpoint": checkpoint, "val_top1": top1, "samples": val_set.len() });
        write_file(&dir.join("eval.json"), &serde_json::to_string_pretty(&json).unwrap())?;
    }
    Ok(())
}

fn cmd_bench(source: &Source, batch: usize, seconds: f64, windows: usize, out: Option<&Path>) -> CliResult {
    let cfg = source.require()?;
    if !(seconds >= 0.0 && seconds.is_finite()) || windows == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--seconds must be >= 0 and --windows >= 1"));
    }
    let model = Model::new(cfg.model, 0)?;
    let t = bench_throughput_windows(&model, batch, Duration::from_secs_f64(seconds), windows)?;
    println!("images/s {:.3} ± {:.3} over {} windows", t.mean, t.std, t.windows.len());
    if let Some(dir) = out {
        write_file(&dir.join("bench.json"), &serde_json::to_string_pretty(&t).unwrap())?;
    }
    Ok(())
}

fn read_input(spec: &str, model: &Model) -> Result<Tensor, Failure> {
    let c = &model.config;
    let shape = [1, c.in_channels, c.image_size, c.image_size];
    if let Some(seed) = spec.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Failure::new(EXIT_CONFIG, format!("bad seed in `{spec}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(Tensor::randn(&shape, 1.0, &mut rng));
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Real>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let want: usize = shape.iter().product();
    if values.len() != want {
        return Err(Error::Format(format!(
            "{}: {} values, expected {want} (C·H·W)",
            path.display(),
            values.len()
        ))
        .into());
    }
    Ok(Tensor::new(&shape, values)?)
}

/// Rows of `m` as CSV lines with `.` decimals and round-trip precision.
pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_export_mixing(
    checkpoint: &Path,
    input: &str,
    layer: usize,
    direction: DirectionArg,
    segment: usize,
    line: usize,
    out: Option<&Path>,
) -> CliResult {
    let ck = Checkpoint::load(checkpoint)?;
    let image = read_input(input, &ck.model)?;
    let dir = match direction {
        DirectionArg::Row => Direction::Row,
        DirectionArg::Col => Direction::Col,
    };
    let p = mixing_matrix(&ck.model, &image, layer, dir, segment, line)?;
    let csv = matrix_csv(&p);
    match out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Analyze { source, format } => cmd_analyze(&source, format),
        Command::Gradcheck {
            source,
            seed,
            eps,
            samples,
            batch,
        } => cmd_gradcheck(&source, seed, eps, samples, batch),
        Command::Train {
            source,
            data,
            out,
            deterministic,
            epochs,
            max_steps,
            seed,
        } => cmd_train(&source, &data, &out, deterministic, epochs, max_steps, seed),
        Command::Eval {
            checkpoint,
            source,
            data,
            out,
        } => cmd_eval(&checkpoint, &source, &data, out.as_deref()),
        Command::Bench {
            source,
            batch,
            seconds,
            windows,
            out,
        } => cmd_bench(&source, batch, seconds, windows, out.as_deref()),
        Command::ExportMixing {
            checkpoint,
            input,
            layer,
            direction,
            segment,
            line,
            out,
        } => cmd_export_mixing(&checkpoint, &input, layer, direction, segment, line, out.as_deref()),
    }
}

/// Parse `args`, run, print any failure to stderr and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
