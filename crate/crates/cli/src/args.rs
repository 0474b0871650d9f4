use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tritower::evaluation::{DEFAULT_PROBE_SEEDS, DEFAULT_SHOTS};
use tritower::losses::{LossTerm, TemperatureMode, TransferKind};
use tritower::towers::{HeadVariant, Modality, ProjectionKind, TrainingMode};

#[derive(Debug, Parser)]
#[command(
    name = "tritower",
    version,
    about = "Three-tower contrastive training on synthetic paired data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train the simulated pretrained classifier and store its embedding table.
    Pretrain(PretrainArgs),
    /// Train a baseline, LiT or three-tower model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's eval split.
    Eval(EvalArgs),
    /// Merge evaluated runs into comparison tables.
    Report(ReportArgs),
}

/// Flags shared by every command that writes a run directory.
#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// JSON file with configuration values; explicit flags take precedence.
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub img_dim: Option<usize>,
    #[arg(long)]
    pub txt_dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Latent dims visible to the pretrained classifier (recorded in the manifest).
    #[arg(long)]
    pub visible_dims: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the dataset's recorded value.
    #[arg(long)]
    pub visible_dims: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Width of the stored embedding table.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained directory; required for `lit` and `3t`.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub frozen_modality: Option<ModalityArg>,
    #[arg(long, value_enum)]
    pub head_variant: Option<HeadArg>,
    #[arg(long)]
    pub loss_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub transfer: Option<TransferArg>,
    #[arg(long, value_enum)]
    pub temps: Option<TempsArg>,
    #[arg(long, value_enum)]
    pub projection: Option<ProjectionArg>,
    /// Leave one loss term out.
    #[arg(long, value_enum)]
    pub drop_term: Option<TermArg>,
    /// Start the main tower on the frozen side from the pretrained classifier body.
    #[arg(long)]
    pub init_main_from_pretrained: bool,
    /// Hidden widths of both main encoders, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Convex-combination weight on the third tower; repeat for a sweep.
    #[arg(long)]
    pub alpha: Vec<f64>,
    #[arg(long, value_enum)]
    pub ood_split: Option<OodArg>,
    /// Number of OOD inputs scored.
    #[arg(long)]
    pub ood_count: Option<usize>,
    #[arg(long, help = format!("Examples per class in few-shot probes [default: {DEFAULT_SHOTS}]"))]
    pub shots: Option<usize>,
    #[arg(long, help = format!("Few-shot probe repetitions [default: {DEFAULT_PROBE_SEEDS}]"))]
    pub probe_seeds: Option<usize>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub ece_bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluated run directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Lit,
    #[value(name = "3t")]
    ThreeTowers,
}

impl From<ModeArg> for TrainingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => TrainingMode::Baseline,
            ModeArg::Lit => TrainingMode::Lit,
            ModeArg::ThreeTowers => TrainingMode::ThreeTowers,
        }
    }
}

/// Command-line spelling of a training mode.
pub fn mode_name(m: TrainingMode) -> &'static str {
    match m {
        TrainingMode::Baseline => "baseline",
        TrainingMode::Lit => "lit",
        TrainingMode::ThreeTowers => "3t",
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Default,
    ThirdOnly,
    MainOnly,
    FullyIndependent,
    Headless,
}

impl From<HeadArg> for HeadVariant {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Default => HeadVariant::Default,
            HeadArg::ThirdOnly => HeadVariant::ThirdOnly,
            HeadArg::MainOnly => HeadVariant::MainOnly,
            HeadArg::FullyIndependent => HeadVariant::FullyIndependent,
            HeadArg::Headless => HeadVariant::Headless,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransferArg {
    Contrastive,
    L2,
}

impl From<TransferArg> for TransferKind {
    fn from(t: TransferArg) -> Self {
        match t {
            TransferArg::Contrastive => TransferKind::Contrastive,
            TransferArg::L2 => TransferKind::SquaredError,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TempsArg {
    Shared,
    PerTerm,
}

impl From<TempsArg> for TemperatureMode {
    fn from(t: TempsArg) -> Self {
        match t {
            TempsArg::Shared => TemperatureMode::Shared,
            TempsArg::PerTerm => TemperatureMode::PerTerm,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProjectionArg {
    Linear,
    Mlp,
}

impl From<ProjectionArg> for ProjectionKind {
    fn from(p: ProjectionArg) -> Self {
        match p {
            ProjectionArg::Linear => ProjectionKind::Linear,
            ProjectionArg::Mlp => ProjectionKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TermArg {
    Fg,
    Fh,
    Gh,
}

impl From<TermArg> for LossTerm {
    fn from(t: TermArg) -> Self {
        match t {
            TermArg::Fg => LossTerm::ImageText,
            TermArg::Fh => LossTerm::ImageThird,
            TermArg::Gh => LossTerm::TextThird,
        }
    }
}

/// Source of out-of-distribution inputs for the MSP detector.
#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OodArg {
    /// Isotropic Gaussian images matched to the data's average variance.
    Noise,
    /// Skip OOD metrics.
    None,
}
