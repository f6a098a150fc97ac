//! The `copyforge` command-line interface.

mod commands;
mod config;

pub use config::{BackendConfig, BackendKind, RetrievalConfig, RobustnessConfig, RunConfig};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::Objective;
use crate::error::{Error, Result};
use crate::perturb::Side;

/// Environment variable naming the embedding cache root.
pub const CACHE_ENV: &str = "COPYFORGE_CACHE_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "copyforge",
    version,
    about = "Multimodal copy detection and region-aware prompt augmentation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decide copy / type for one pair or a manifest of pairs.
    Detect(DetectArgs),
    /// Sweep thresholds and weights on labeled scores.
    Calibrate(CalibrateArgs),
    /// Rank gallery images for a query, or compute the copy rate of a query directory.
    Retrieve(RetrieveArgs),
    /// Embed a directory of reference images into a gallery index.
    Index(IndexArgs),
    /// Score a pair under the attack suite.
    Robustness(RobustnessArgs),
    /// Produce a region-aware prompt augmentation trace.
    Augment(AugmentArgs),
    /// Write perturbed copies of an image.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, requires = "reference", conflicts_with = "manifest")]
    pub generated: Option<PathBuf>,
    #[arg(long, requires = "generated")]
    pub reference: Option<PathBuf>,
    /// JSONL of {query, reference, label}.
    #[arg(long, required_unless_present = "generated")]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Accuracy,
    F1,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Accuracy => Objective::Accuracy,
            ObjectiveArg::F1 => Objective::F1,
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSONL of labeled similarity scores.
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub scores: Option<PathBuf>,
    /// Labeled pair manifest; scores are computed first.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Also render PNG plots next to the CSVs.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Query image, or a directory of queries for copy-rate mode.
    #[arg(long)]
    pub query: PathBuf,
    /// Index directory written by `copyforge index`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(short, long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Directory of PNG/JPEG reference images.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Index directory (default: <out>/index).
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SideArg {
    Generated,
    Reference,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Generated => Side::Generated,
            SideArg::Reference => Side::Reference,
        }
    }
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Which image of the pair is attacked.
    #[arg(long, value_enum)]
    pub side: Option<SideArg>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// JSON array of detector proposals; no boxes when absent.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Template file, one template per line.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Attack kind to apply (repeatable); all configured attacks when omitted.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("copyforge: error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.global.workers {
        config.workers = workers;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| commands::dispatch(cli.command, config, &cli.global.out))
}
