//! Command-line front end: `extract`, `merge`, `analyze` and `verify`.
//!
//! Exit codes: 0 on success, 2 when some targeted layers were skipped (the
//! manifest is still written), 1 on any hard error including usage errors.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Dtype;
use crate::error::{Error, Result};

pub use commands::{analyze, extract, merge, verify, Outcome};
pub use manifest::{LayerOutcome, RunManifest, SizeReport, VerifyCheck};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Default global adapter rank.
pub const DEFAULT_RANK: usize = 32;
/// Layers with `min(d, k)` above this use the randomized kernel under `--method auto`.
pub const AUTO_RANDOMIZED_MIN_DIM: usize = 2048;
/// Environment variable overriding the randomized-SVD seed.
pub const SEED_ENV: &str = "PHLORA_SEED";

#[derive(Debug, Parser)]
#[command(name = "phlora", version, about = "Extract, analyze, merge and verify post-hoc LoRA adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract a LoRA adapter from the weight deltas of a base/fine-tuned pair.
    Extract(ExtractArgs),
    /// Merge an adapter into a base checkpoint (W + scale·B·A).
    Merge(MergeArgs),
    /// Report preserved energy per layer and rank without writing an adapter.
    Analyze(AnalyzeArgs),
    /// Check that each adapter layer is the optimal truncation of its delta.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    /// Exact below the size threshold, randomized above it.
    Auto,
    Exact,
    Randomized,
}

impl MethodArg {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodArg::Auto => "auto",
            MethodArg::Exact => "exact",
            MethodArg::Randomized => "randomized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F64,
    F32,
    F16,
    Bf16,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F64 => Dtype::F64,
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
            DtypeArg::Bf16 => Dtype::BF16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FactorDtypeArg {
    F64,
    F32,
    F16,
}

/// Inputs shared by the commands that diff two checkpoints.
#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    /// Base (pre-fine-tuning) checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Glob selecting target layers (`*` any substring, `?` one character). Repeatable.
    #[arg(long = "target-pattern", default_value = "*")]
    pub target_patterns: Vec<String>,
    /// Glob excluding layers. Repeatable.
    #[arg(long = "exclude-pattern")]
    pub exclude_patterns: Vec<String>,
    /// Skip layers whose smaller dimension is below this.
    #[arg(long, default_value_t = 1)]
    pub min_dim: usize,
    /// SVD kernel.
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    /// Worker threads for per-layer work (default: number of processors).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Output adapter directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Global adapter rank [default: 32].
    #[arg(long, conflicts_with = "energy_threshold", value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: Option<u64>,
    /// Pick each layer's rank as the smallest reaching this preserved-energy fraction.
    #[arg(long)]
    pub energy_threshold: Option<f64>,
    /// Manifest path [default: <out>/phlora_manifest.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Storage dtype of the adapter factors (f64 for a lossless round trip).
    #[arg(long, value_enum, default_value_t = FactorDtypeArg::F32)]
    pub factor_dtype: FactorDtypeArg,
    /// Value for `base_model_name_or_path` [default: the base checkpoint path].
    #[arg(long)]
    pub base_model_id: Option<String>,
    /// JSON object renaming layer names in the written adapter.
    #[arg(long)]
    pub name_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter directory.
    #[arg(long)]
    pub adapter: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    /// Dtype for merged layers only; other tensors are copied byte-for-byte
    /// [default: each layer keeps its base dtype].
    #[arg(long, value_enum)]
    pub dtype: Option<DtypeArg>,
    /// Manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Probe ranks, comma separated; sorted and de-duplicated.
    #[arg(long, value_delimiter = ',', default_value = "32,64,512")]
    pub ranks: Vec<usize>,
    /// Also select per-layer ranks by this preserved-energy threshold.
    #[arg(long)]
    pub energy_threshold: Option<f64>,
    /// Write `layer,rank,energy` rows here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the JSON mirror of the report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Manifest path (optional).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    /// Manifest path (optional).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
}

/// Randomized-SVD base seed: `PHLORA_SEED` when set, else the built-in default.
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(crate::linalg::randomized::DEFAULT_SEED),
    }
}

/// Parse arguments, run the command, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Extract(a) => extract(a),
        Command::Merge(a) => merge(a),
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(outcome) => outcome.exit_code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
