use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use creepformer::data::SplitMode;

#[derive(Debug, Parser)]
#[command(name = "creepformer", version, about = "Concrete creep forecasting with a triple-attention transformer")]
pub struct Cli {
    /// Flat `key = value` file with model and training settings.
    #[arg(long, global = true, env = "CREEPFORMER_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic creep dataset.
    Synth(SynthArgs),
    /// Fit the creep curve to every specimen and report goodness of fit.
    Fit(FitArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Teacher-forced evaluation of a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Train every ablation variant and write the comparison table.
    Ablate(AblateArgs),
    /// Forecast a creep trajectory from specimen properties.
    Rollout(RolloutArgs),
    /// Shapley attributions of the specimen features.
    Explain(ExplainArgs),
    /// Per-component forward FLOPs of the configured architecture.
    Flops(FlopsArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    PerWindow,
    PerSpecimen,
}

impl From<SplitArg> for SplitMode {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::PerWindow => SplitMode::PerWindow,
            SplitArg::PerSpecimen => SplitMode::PerSpecimen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// Where the measurements come from and how windows are split.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Measurement CSV (`specimen_id,density_kg_m3,fc_ksc,E_ksc,time_day,creep_microstrain`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "per-window")]
    pub split: SplitArg,
    /// Split seed; defaults to the training seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 66)]
    pub n: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fitted parameters per specimen.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional export of the daily-resampled dataset (days 1..=160).
    #[arg(long)]
    pub standardized: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    #[arg(long)]
    pub residuals: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// kg/m³
    #[arg(long)]
    pub density: f64,
    /// Compressive strength, ksc.
    #[arg(long)]
    pub fc: f64,
    /// Elastic modulus, ksc.
    #[arg(long)]
    pub e: f64,
    /// Creep on day 1, microstrain.
    #[arg(long)]
    pub initial_creep: f64,
    #[arg(long, default_value_t = 161)]
    pub days: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Explain at most this many windows (evenly spaced through the subset).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Mean |SHAP| per feature.
    #[arg(long)]
    pub importance: PathBuf,
    /// One row per (sample, feature).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 160)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Measurement CSV whose feature rows form the attribution background.
    /// Without it the background is the single row of training means.
    #[arg(long)]
    pub background: Option<PathBuf>,
}
