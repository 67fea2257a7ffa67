use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use storyloom_core::layout::LayoutSpec;
use storyloom_core::trainer::MemoryMode;

#[derive(Parser, Debug)]
#[command(name = "storyloom", version, about = "Query-conditioned story generation toolkit")]
pub struct Cli {
    /// Root seed; overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run configuration (TOML). Missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (for `mask dump`, the output file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic corpus generation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train one stage; stage 1 includes generator pretraining.
    Train(TrainArgs),
    /// Plan and generate a story from a checkpoint.
    Rollout(RolloutArgs),
    /// Train all stage-2/stage-3 variants and print the drift table.
    Ablate(AblateArgs),
    /// Attention-mask utilities.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Analytical cost model.
    #[command(subcommand)]
    Cost(CostCommand),
    /// Held-out metrics of a checkpoint.
    Metrics(MetricsArgs),
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Write train/val/test splits.
    Gen(DataGenArgs),
}

#[derive(Args, Debug)]
pub struct DataGenArgs {
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Checkpoint to continue from (default: `<out>/checkpoint.bin` if present).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Corpus directory written by `data gen`; generated from the seed if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stop after this many steps of the current phase, leaving it resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    TeacherForced,
    SelfRollout,
}

impl From<ModeArg> for MemoryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TeacherForced => MemoryMode::TeacherForced,
            ModeArg::SelfRollout => MemoryMode::SelfRollout,
        }
    }
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "self-rollout")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    pub n_frames: usize,
    /// Test story whose input prefix (and, teacher-forced, frames) to use.
    #[arg(long, default_value_t = 0)]
    pub story: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated seeds (default: the root seed only).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Subcommand, Debug)]
pub enum MaskCommand {
    /// Write the attention mask of a layout as rows of 0/1.
    Dump(MaskDumpArgs),
}

#[derive(Args, Debug)]
pub struct MaskDumpArgs {
    /// Segments such as `input:2,text:2,query:2,text:1`.
    #[arg(long)]
    pub layout: LayoutSpec,
    /// Let input positions attend to each other in both directions.
    #[arg(long)]
    pub bidirectional_input: bool,
}

#[derive(Subcommand, Debug)]
pub enum CostCommand {
    /// Per-frame and cumulative cost of both strategies.
    Report(CostReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug)]
pub struct CostReportArgs {
    /// Model dimensions (TOML); defaults if absent.
    #[arg(long)]
    pub dims: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}
