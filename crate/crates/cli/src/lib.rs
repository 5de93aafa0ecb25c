//! Command-line front end for `csa-core`.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors and for
//! failed self-checks, 2 for runtime failures (I/O, malformed files,
//! divergence).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use csa_core::model::Variant;
use csa_core::CsaError;

use config::{ConfigFile, ModelSection, TrainSection, DEFAULT_SEED};

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(CsaError),
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::ChecksFailed(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(CsaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::ChecksFailed(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl From<CsaError> for CliError {
    fn from(e: CsaError) -> Self {
        match e {
            CsaError::InvalidConfig(msg) => CliError::Invalid(msg),
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "csa", version, about = "Train and inspect channel spatial attention networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model.
    Train(RunArgs),
    /// Train baseline, SE and CSA on the same data and compare them.
    Compare(RunArgs),
    /// Evaluate a checkpoint.
    Eval(CheckpointArgs),
    /// Write per-stage descriptor tables for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(CheckArgs),
    /// Run the property checks and the gradient checks.
    Selftest(CheckArgs),
}

/// Data and seed options shared by every command that loads data.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synthetic` or `idx:<dir>` with the four MNIST IDX files.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Use only the first N train and test samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Seed for the model, the shuffle order and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
}

// An alias keeps clap from treating the list as a repeated argument.
type Milestones = Vec<usize>;

fn parse_milestones(s: &str) -> Result<Milestones, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate drops tenfold,
    /// or `none`.
    #[arg(long, value_parser = parse_milestones)]
    pub milestones: Option<Milestones>,
    #[arg(long)]
    pub reduction: Option<usize>,
    /// Treat the contiguity weights as constants in the backward pass.
    #[arg(long)]
    pub stop_grad_weights: bool,
    /// Horizontal shift augmentation.
    #[arg(long)]
    pub augment: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Exponential smoothing factor for the `*_ema` columns.
    #[arg(long, default_value_t = csa_core::analysis::EMA_FACTOR, conflicts_with = "no_smoothing")]
    pub smoothing: f64,
    /// Omit the smoothed columns.
    #[arg(long)]
    pub no_smoothing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Also write the results as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl DataArgs {
    fn layer(&self) -> ConfigFile {
        ConfigFile {
            dataset: self.dataset.clone(),
            limit: self.limit,
            seed: self.seed,
            ..ConfigFile::default()
        }
    }

    /// Merges `base`, the `--config` file and the flags in that order.
    fn merge(&self, base: ConfigFile, flags: ConfigFile) -> Result<ConfigFile, CliError> {
        let file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        Ok(base.overlay(file).overlay(self.layer()).overlay(flags))
    }
}

impl RunArgs {
    fn flags(&self) -> ConfigFile {
        ConfigFile {
            model: ModelSection {
                variant: self.variant,
                reduction: self.reduction,
                stop_grad_weights: self.stop_grad_weights.then_some(true),
                ..ModelSection::default()
            },
            train: TrainSection {
                epochs: self.epochs,
                batch_size: self.batch,
                lr: self.lr,
                milestones: self.milestones.clone(),
                augment: self.augment.then_some(true),
                ..TrainSection::default()
            },
            ..ConfigFile::default()
        }
    }

    pub fn resolve(&self) -> Result<config::RunConfig, CliError> {
        Ok(self.data.merge(ConfigFile::default(), self.flags())?.resolve()?)
    }
}

/// Dataset settings for a checkpoint: the recorded run, then `--config`,
/// then flags.
fn checkpoint_run(data: &DataArgs, recorded: ConfigFile) -> Result<config::RunConfig, CliError> {
    Ok(data.merge(recorded, ConfigFile::default())?.resolve()?)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => commands::cmd_train(&args.resolve()?, &args.out),
        Command::Compare(args) => commands::cmd_compare(&args.resolve()?, &args.out),
        Command::Eval(args) => {
            let (model, recorded) = commands::load_checkpoint(&args.checkpoint)?;
            let run = checkpoint_run(&args.data, recorded)?;
            commands::cmd_eval(&model, &run, args.out.as_deref()).map(|_| ())
        }
        Command::Analyze(args) => {
            let (model, recorded) = commands::load_checkpoint(&args.checkpoint)?;
            let run = checkpoint_run(&args.data, recorded)?;
            let smoothing = (!args.no_smoothing).then_some(args.smoothing);
            if let Some(a) = smoothing {
                if !(0.0..1.0).contains(&a) {
                    return Err(CliError::Invalid(format!("smoothing must lie in [0, 1), got {a}")));
                }
            }
            commands::cmd_analyze(&model, &run, smoothing, &args.out).map(|_| ())
        }
        Command::Gradcheck(args) => commands::cmd_gradcheck(args.seed, args.out.as_deref()),
        Command::Selftest(args) => commands::cmd_selftest(args.seed, args.out.as_deref()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
