//! The `dpml` command line. Every command writes CSV, either to `--out` or to
//! stdout, headed by a `# manifest:` line that records the effective inputs.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dpml_core::accountant::AccountantError;
use dpml_core::data::DataError;
use dpml_core::dppca::PcaError;
use dpml_core::dpsgd::DpSgdError;
use dpml_core::nn::NnError;
use thiserror::Error;

pub const THREADS_ENV: &str = "DP_TOOLKIT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", first_line(&.0.to_string()))]
    Clap(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("config file {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Training(#[from] DpSgdError),
    #[error(transparent)]
    Model(#[from] NnError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(_) | CliError::Usage(_) | CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    line.trim_start_matches("error: ").trim().to_string()
}

/// Comma-separated list such as `1000` or `500,250`; empty means none.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

#[derive(Debug, Parser)]
#[command(name = "dpml", version, about = "Differentially private training toolkit")]
pub struct Cli {
    /// key=value file of flag values; flags given on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Moments-accountant epsilon after each epoch
    AccountantCurve(CurveArgs),
    /// Strong composition versus the moments accountant, per epoch
    CompareComposition(CurveArgs),
    /// DP-SGD training with optional DP-PCA preprocessing
    Train(TrainArgs),
    /// Release a differentially private PCA projection
    Pca(PcaArgs),
    /// Privacy cost of a private hyperparameter search
    Budget(BudgetArgs),
    /// Median per-example gradient norms, for choosing a clipping bound
    ClipDiagnostic(ClipDiagnosticArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// CSV destination; stdout when absent. A `<out>.manifest` file with
    /// timestamps is written next to it.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Sampling rate q = L/N
    #[arg(long, default_value_t = 0.01)]
    pub q: f64,
    /// Noise multiplier
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: u64,
    /// Lots per epoch; defaults to round(1/q)
    #[arg(long)]
    pub lots_per_epoch: Option<u64>,
    /// Highest moment order tracked
    #[arg(long, default_value_t = 32)]
    pub max_order: u32,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files (optionally gzipped)
    #[arg(long, value_name = "DIR")]
    pub mnist: Option<PathBuf>,
    /// Use synthetic Gaussian blobs instead of MNIST
    #[arg(long)]
    pub blobs: bool,
    #[arg(long, default_value_t = 10)]
    pub blob_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub blob_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub blob_dim: usize,
    #[arg(long, default_value_t = 6.0)]
    pub blob_separation: f64,
    /// Seed for blob generation (independent of --seed)
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Keep only the first N training examples
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Keep only the first N test examples
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PcaFlags {
    /// Projection dimension
    #[arg(long, default_value_t = 60)]
    pub pca_dim: usize,
    /// Noise multiplier of the covariance release
    #[arg(long, default_value_t = 7.0)]
    pub sigma_pca: f64,
    /// Fraction of training rows sampled for the covariance
    #[arg(long, default_value_t = 0.1)]
    pub pca_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pca: PcaFlags,
    /// Train on raw features
    #[arg(long)]
    pub no_pca: bool,
    /// Hidden layer widths, comma separated (empty for a linear model)
    #[arg(long, default_value = "1000")]
    pub hidden: List<usize>,
    /// Lot size L
    #[arg(long, default_value_t = 600)]
    pub lot: usize,
    /// Clipping bound per layer (one value, or one per layer); `inf` disables
    #[arg(long, default_value = "4")]
    pub clip: List<f64>,
    /// Clip the whole gradient vector jointly against the first bound
    #[arg(long)]
    pub whole_vector: bool,
    /// Noise multiplier of the gradient sanitizer
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.052)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lr_decay_epochs: f64,
    #[arg(long, default_value_t = 100.0)]
    pub epochs: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    /// Stop before the step that would push epsilon past this value
    #[arg(long)]
    pub target_eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the trained network here
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Write the PCA projection here
    #[arg(long, value_name = "FILE")]
    pub projection_out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pca: PcaFlags,
    /// Delta at which the release's epsilon is reported
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub projection_out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Privacy cost of each training run
    #[arg(long, default_value_t = 4.0)]
    pub epsilon: f64,
    /// Privacy cost of the randomized selection
    #[arg(long, default_value_t = 0.5)]
    pub epsilon_prime: f64,
    /// Failure probability of the accuracy guarantee
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Fraction of candidate settings that are good
    #[arg(long, default_value_t = 1.0 / 6700.0)]
    pub p: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ClipDiagnosticArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "1000")]
    pub hidden: List<usize>,
    /// Examples sampled for the median
    #[arg(long, default_value_t = 1000)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measure this network instead of a fresh initialization
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Project features first (the projection the model was trained on)
    #[arg(long, value_name = "FILE")]
    pub projection: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Argument ids that name output files or the config file; they are left
/// out of the manifest so reruns into a different location stay identical.
const NOT_INPUTS: &[&str] = &["out", "checkpoint", "projection_out", "config", "help", "version"];

/// `# manifest: dpml <version> command=<name> key=value ...` over every
/// effective input, defaults included, in declaration order.
fn manifest_line(cmd: &clap::Command, name: &str, matches: &ArgMatches) -> String {
    let sub = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut line = format!("# manifest: dpml {} command={name}", env!("CARGO_PKG_VERSION"));
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        if NOT_INPUTS.contains(&id) {
            continue;
        }
        let key = arg.get_long().unwrap_or(id);
        let value = if arg.get_action().takes_values() {
            match matches.get_raw(id) {
                Some(vals) => vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(","),
                None => continue,
            }
        } else {
            matches.get_flag(id).to_string()
        };
        if value.chars().any(char::is_whitespace) {
            line.push_str(&format!(" {key}={value:?}"));
        } else {
            line.push_str(&format!(" {key}={value}"));
        }
    }
    line
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Where a command's CSV goes, plus the manifest that heads it.
pub(crate) struct Sink<'a> {
    pub manifest: String,
    out: Option<PathBuf>,
    stdout: &'a mut dyn Write,
    started: u64,
}

impl Sink<'_> {
    /// Writes the manifest line followed by `body`.
    pub fn emit(&mut self, body: &[u8]) -> Result<(), CliError> {
        let mut bytes = Vec::with_capacity(body.len() + self.manifest.len() + 1);
        bytes.extend_from_slice(self.manifest.as_bytes());
        bytes.push(b'\n');
        bytes.extend_from_slice(body);
        match &self.out {
            None => self.stdout.write_all(&bytes).map_err(|e| CliError::io("writing stdout", e)),
            Some(path) => {
                std::fs::write(path, &bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
                let mut side = path.clone().into_os_string();
                side.push(".manifest");
                let record = format!(
                    "{}\nstarted_unix={}\nfinished_unix={}\n",
                    self.manifest,
                    self.started,
                    unix_now()
                );
                std::fs::write(&side, record)
                    .map_err(|e| CliError::io(format!("writing {}", PathBuf::from(&side).display()), e))
            }
        }
    }
}

/// Parses `args` (program name first) and runs the command, sending CSV to
/// `stdout` unless `--out` is given.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let started = unix_now();
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true).allow_negative_numbers(true));
    let args = config::expand(args.into_iter().map(Into::into).collect(), &cmd)?;
    let matches = cmd.clone().try_get_matches_from(args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    configure_threads()?;

    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let manifest = manifest_line(&cmd, name, sub_matches);
    let out = match &cli.command {
        Command::AccountantCurve(a) | Command::CompareComposition(a) => &a.output,
        Command::Train(a) => &a.output,
        Command::Pca(a) => &a.output,
        Command::Budget(a) => &a.output,
        Command::ClipDiagnostic(a) => &a.output,
    };
    let mut sink = Sink {
        manifest,
        out: out.out.clone(),
        stdout,
        started,
    };
    match &cli.command {
        Command::AccountantCurve(a) => commands::accountant_curve(a, &mut sink),
        Command::CompareComposition(a) => commands::compare_composition(a, &mut sink),
        Command::Train(a) => commands::train(a, &mut sink),
        Command::Pca(a) => commands::pca(a, &mut sink),
        Command::Budget(a) => commands::budget(a, &mut sink),
        Command::ClipDiagnostic(a) => commands::clip_diagnostic(a, &mut sink),
    }
}
