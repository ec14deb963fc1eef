//! `mowe`: dataset generation, training, evaluation, router ablations,
//! routing reports, and gradient checks from one binary.
//!
//! Flags override config-file values, which override built-in defaults.
//! Every command exits 0 on success; on failure it exits nonzero and
//! prints a one-line JSON object to stderr with `kind` and `message`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mowe_core::error::MoweError;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "mowe", version, about = "Mixture-of-weak-encoders experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// Config file (TOML); falls back to $MOWE_CONFIG, then defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads. Any value is deterministic; 1 keeps
    /// everything on one core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-task dataset.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint, reports, and config echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split; prints metrics JSON.
    Eval(EvalArgs),
    /// Train every router setup and emit a comparative CSV.
    Ablate(AblateArgs),
    /// Per-task encoder selection proportions from a checkpoint.
    RouteReport(RouteReportArgs),
    /// Autodiff against finite differences, per op family and end to end.
    GradCheck(GradCheckArgs),
    /// Config-file helpers.
    Config(ConfigArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for the dataset files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Samples per task; overrides the [data] section.
    #[arg(long)]
    pub n_per_task: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoint and reports.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides [trainer] epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides [trainer] batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides [trainer] peak_lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// First train on the transcription task alone, then on all tasks.
    #[arg(long)]
    pub two_stage: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file from train.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory; the held-out split is evaluated.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Overrides [trainer] batch_size. Routing diversity is measured per
    /// batch, so matching the training value reproduces training metrics.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write metrics and manifest into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset directory from gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for the comparison table and per-setup reports.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides [trainer] epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct RouteReportArgs {
    /// Checkpoint file from train.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory; the held-out split is evaluated.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Also write the table and summary into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradCheckArgs {
    /// Also write the report JSON into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConfigArgs {
    #[command(subcommand)]
    pub action: ConfigAction,
}

#[derive(Subcommand)]
pub enum ConfigAction {
    /// Print the complete default config as TOML.
    ShowDefaults,
}

fn error_kind(e: &MoweError) -> &'static str {
    match e {
        MoweError::ShapeMismatch { .. } => "shape-mismatch",
        MoweError::InvalidArgument(_) => "invalid-argument",
        MoweError::IndexOutOfRange { .. } => "index-out-of-range",
        MoweError::Config(_) => "config",
        MoweError::NonFinite { .. } => "non-finite",
        MoweError::UnknownParam(_) => "unknown-param",
        MoweError::Io { .. } => "io",
        MoweError::Format { .. } => "format",
    }
}

fn emit_error(kind: &str, message: &str) {
    let payload = serde_json::json!({
        "error": true,
        "kind": kind,
        "message": message,
    });
    eprintln!("{payload}");
}

fn main() -> ExitCode {
    // Die quietly when the reader of a pipe goes away, like cat does.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            emit_error("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(error_kind(&e), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
