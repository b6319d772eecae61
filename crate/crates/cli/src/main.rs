//! `redistill`: peak-memory analysis, aggressive-pooling rewrites, RED
//! alignment plans and the desk-scale distillation experiments.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "redistill", version, about = "Peak-memory planning and residual encoded distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Theoretical peak activation memory of a graph.
    Analyze(AnalyzeArgs),
    /// Derive the aggressively pooled student of a graph.
    Rewrite(RewriteArgs),
    /// Pair student downsampling layers with teacher feature taps.
    Plan(PlanArgs),
    /// Finite-difference gradient checks of the distillation kernels.
    GradCheck(GradCheckArgs),
    /// Train a toy teacher and distill students on the grating task.
    TrainToy(TrainToyArgs),
    /// Reproduce a summary table.
    Report(ReportArgs),
    /// List zoo models or export one as graph IR.
    Zoo(ZooArgs),
}

/// A graph given as an IR file or as a zoo model.
#[derive(Debug, Args)]
pub struct GraphSource {
    /// Graph IR file (JSON).
    #[arg(value_name = "IR", conflicts_with = "model", required_unless_present = "model")]
    pub ir: Option<PathBuf>,
    /// Zoo model name instead of an IR file.
    #[arg(long)]
    pub model: Option<String>,
    /// Input resolution for --model (defaults to the model's own).
    #[arg(long, requires = "model")]
    pub res: Option<u64>,
}

/// Destination for a command's main artifact.
#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write to this path instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Allow --out to replace an existing file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BnAct {
    /// BatchNorm and activation run in the producing convolution's buffer.
    Fused,
    /// Every BatchNorm and activation materializes its own output.
    Separate,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: GraphSource,
    /// Analyze the student derived with this pooling multiplier.
    #[arg(long, default_value_t = 1)]
    pub multiplier: u64,
    /// Also print the exact peak in bytes.
    #[arg(long)]
    pub bytes: bool,
    /// Emit the per-layer footprint in this format.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// How BatchNorm/activation outputs are accounted.
    #[arg(long, value_enum, default_value_t = BnAct::Fused)]
    pub bn_act: BnAct,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RewriteArgs {
    #[command(flatten)]
    pub source: GraphSource,
    /// Total extra stride, a power of two.
    #[arg(long)]
    pub multiplier: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Alignment {
    PoolingAlign,
    StageAlign,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Teacher graph IR file.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student graph IR file.
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long, value_enum, default_value_t = Alignment::PoolingAlign)]
    pub alignment: Alignment,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Operation to check, or `all` for every non-control operation.
    #[arg(long, default_value = "all")]
    pub op: String,
    /// Number of seeded instances per operation.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Print one JSON report per instance.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Distance {
    Cosine,
    Euclidean,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Number of paired seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// RED loss weight.
    #[arg(long, default_value_t = 50.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = Distance::Cosine)]
    pub distance: Distance,
    /// full, no_logit, no_residual_encoder, no_shortcut or no_red_block.
    #[arg(long, default_value = "full")]
    pub ablation: String,
    #[arg(long, value_enum, default_value_t = Alignment::PoolingAlign)]
    pub alignment: Alignment,
    /// Kernel size of the residual encoder (1, 3 or 5).
    #[arg(long, default_value_t = 3)]
    pub re_kernel_size: usize,
    /// Add the logit distillation term.
    #[arg(long)]
    pub kd: bool,
    #[arg(long, default_value_t = 4.0)]
    pub kd_temperature: f64,
    /// Student pooling multiplier.
    #[arg(long, default_value_t = 4)]
    pub multiplier: u64,
    /// Also run the plain student without distillation.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 256)]
    pub teacher_per_class: usize,
    #[arg(long, default_value_t = 128)]
    pub student_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub test_per_class: usize,
    /// Directory for metrics.jsonl and summary.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow replacing files in --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub table: ReportTable,
}

#[derive(Debug, Subcommand)]
pub enum ReportTable {
    /// Teacher and student peak memory for every zoo classifier.
    Memory {
        #[arg(long, default_value_t = 4)]
        multiplier: u64,
    },
    /// RED block ablations on the toy task.
    Ablation {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Plain versus distilled toy U-Net denoisers.
    Ddpm {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ZooArgs {
    /// Model to export; lists the zoo when omitted.
    pub model: Option<String>,
    #[arg(long)]
    pub res: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("REDISTILL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("REDISTILL_THREADS must be a positive integer, got `{raw}`")))?;
    if n == 1 {
        redistill::par::set_default(redistill::par::Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size worker pool: {e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(failure::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|()| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
