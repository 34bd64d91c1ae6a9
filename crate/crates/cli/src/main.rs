mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

/// Dense matching with neighbourhood consensus networks.
#[derive(Debug, Parser)]
#[command(name = "ncnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match two feature files and write one JSONL record per cell of A.
    Match(MatchArgs),
    /// Train consensus weights on a labelled dataset directory.
    Train(TrainArgs),
    /// Transfer keypoints and report PCK.
    EvalPck(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the dense kernels across grid sizes.
    Bench(BenchArgs),
    /// Write a synthetic dataset of translated feature pairs.
    Synth(SynthArgs),
    /// Compute patch descriptors of a PGM image.
    Describe(DescribeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Category,
    Instance,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    CenterIdentity,
    Uniform,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum, default_value = "instance")]
    preset: PresetArg,
    /// Pool the correlation once and refine coordinates with the pooling shifts.
    #[arg(long)]
    relocalize: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with a manifest.txt of `path_a path_b +1|-1` lines.
    #[arg(long)]
    data: PathBuf,
    /// Optional validation directory in the same layout.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "instance")]
    preset: PresetArg,
    #[arg(long, value_enum, default_value = "center-identity")]
    init: InitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5e-4)]
    lr: f32,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    weights_out: PathBuf,
    #[arg(long)]
    loss_csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON file with image sizes and `[xa, ya, xb, yb]` keypoint pairs.
    #[arg(long)]
    keypoints: PathBuf,
    /// Precomputed matches; alternatively give weights and both feature files.
    #[arg(long, conflicts_with_all = ["weights", "features_a", "features_b"])]
    matches: Option<PathBuf>,
    #[arg(long, requires_all = ["features_a", "features_b"])]
    weights: Option<PathBuf>,
    #[arg(long)]
    features_a: Option<PathBuf>,
    #[arg(long)]
    features_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "instance")]
    preset: PresetArg,
    #[arg(long)]
    relocalize: bool,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Also write the value to this file.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square feature grids.
    #[arg(long, default_value_t = 6)]
    grid: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    abs_tol: f64,
    /// Scale one analytic gradient entry before comparing (debugging aid).
    #[arg(long)]
    corrupt: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated grid sides.
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    memory_limit_mb: u64,
    /// Exit with status 3 unless correlation time and memory grow within a
    /// factor of two of (hw)^2.
    #[arg(long)]
    check_trend: bool,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    positives: usize,
    #[arg(long, default_value_t = 10)]
    negatives: usize,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Tile period of the repeated pattern; 0 disables repetition.
    #[arg(long, default_value_t = 0)]
    period: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 2)]
    max_shift: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Match(a) => commands::run_match(a),
        Command::Train(a) => commands::run_train(a),
        Command::EvalPck(a) => commands::run_eval_pck(a),
        Command::Gradcheck(a) => commands::run_gradcheck(a),
        Command::Bench(a) => commands::run_bench(a),
        Command::Synth(a) => commands::run_synth(a),
        Command::Describe(a) => commands::run_describe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
                CliError::Check(_) => 3,
            })
        }
    }
}
