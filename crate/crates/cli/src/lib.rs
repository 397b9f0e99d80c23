//! `neuseg` command-line pipeline: synthetic data generation, forest
//! training, label synthesis, tiled segmentation, candidate filtering and
//! evaluation.
//!
//! Exit codes: 0 success, 2 input error, 3 invariant violation, 4 resource
//! guard.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;
pub use error::{CliError, CliResult, ExitKind};

/// File written next to every command's outputs with versions, the config
/// hash and timings. It is the only output that differs between reruns.
pub const LOG_FILE: &str = "log.json";

#[derive(Debug, Parser)]
#[command(name = "neuseg", version, about = "Cell instance segmentation from point annotations")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Gen(GenArgs),
    /// Train the pixel classifier on dataset scenes.
    TrainRf(TrainRfArgs),
    /// Turn point annotations into three-class training masks.
    SynthLabels(SynthLabelsArgs),
    /// Tiled instance segmentation.
    Segment(SegmentArgs),
    /// Train the candidate IoU regressor.
    TrainFilter(TrainFilterArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Print the tiling plan of an image.
    Plan(PlanArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated densities: sparse, dense, very-dense.
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<String>>,
    /// Comma-separated scene seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

/// Scene selection within a generated dataset.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated scene indices; all scenes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainRfArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for rf.json and samples.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthLabelsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Single image (instead of a dataset).
    #[arg(long, requires = "centroids", conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Point annotations CSV (`id,x,y`) for --image.
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    /// Trained forest.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Single image (instead of a dataset).
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Trained forest.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trained IoU regressor; candidates are not filtered without it.
    #[arg(long)]
    pub filter: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    #[arg(long)]
    pub memory_budget_mb: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFilterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained forest.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory for filter.json and filter_table.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Root holding `<scene>/labels.png` predictions for --data.
    #[arg(long)]
    pub pred_root: Option<PathBuf>,
    /// Single predicted label map (instead of a dataset).
    #[arg(long, conflicts_with = "data", requires_all = ["gt", "centroids"])]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Take the size from this image.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Write the plan here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            CliError::new(ExitKind::Input, "").silent()
        } else {
            CliError::new(ExitKind::Input, e.to_string())
        }
    })?;
    commands::dispatch(cli)
}

/// Entry point shared by the binary: runs and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_silent() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
