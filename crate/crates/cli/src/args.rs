use std::path::PathBuf;

use capgan::decoding::DiverseMode;
use capgan::training::Ablation;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "capgan", version, about = "Diverse audio captioning with adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic or imported corpus as manifests and feature files.
    PrepareData(PrepareArgs),
    /// Pretrain the generator with maximum likelihood.
    Pretrain(StageArgs),
    /// Pretrain the naturalness discriminator against generator samples.
    PretrainD(StageArgs),
    /// Pretrain the semantic evaluator.
    PretrainSe(StageArgs),
    /// Adversarial training from the three pretrained checkpoints.
    TrainGan(GanArgs),
    /// Write several captions per clip for one split.
    Generate(GenerateArgs),
    /// Score a caption file against a split's references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate a synthetic corpus.
    #[arg(long, conflicts_with = "import", required_unless_present = "import")]
    pub synthetic: bool,
    /// Import a tree with `<split>/captions.csv` and `<split>/features/`.
    #[arg(long, value_name = "DIR")]
    pub import: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub clips: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub feat_dim: usize,
    /// Replace an existing corpus in `--out`.
    #[arg(long)]
    pub force: bool,
}

/// Flags shared by every training and generation command. Set flags win
/// over the config file, which wins over built-in defaults.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory written by `prepare-data`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Longest caption in content tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub common: Common,
    /// Epochs for this stage.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Continue from the stage's last checkpoint (generator pretraining only).
    #[arg(long)]
    pub resume: bool,
    /// Generator checkpoint to sample fakes from (discriminator pretraining).
    #[arg(long, value_name = "FILE")]
    pub generator: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationArg {
    Nd,
    Se,
    Le,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Nd => Ablation::Nd,
            AblationArg::Se => Ablation::Se,
            AblationArg::Le => Ablation::Le,
        }
    }
}

#[derive(Debug, Args)]
pub struct GanArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Reward mixing weight.
    #[arg(long, conflicts_with = "lambda_sweep")]
    pub lambda: Option<f64>,
    /// Comma-separated weights; one run directory each.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
    pub lambda_sweep: Option<Vec<f64>>,
    /// Train with a single reward term.
    #[arg(long, value_enum, conflicts_with_all = ["lambda", "lambda_sweep"])]
    pub ablation: Option<AblationArg>,
    /// Learning rate of the adversarial stage.
    #[arg(long)]
    pub adversarial_lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    /// Zero noise; the top distinct beam hypotheses.
    Mle,
    /// A fresh noise vector per caption, each decoded by beam search.
    Gan,
}

impl From<ModeArg> for DiverseMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mle => DiverseMode::Mle,
            ModeArg::Gan => DiverseMode::Gan,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum SplitArg {
    Train,
    #[default]
    Evaluation,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Generator checkpoint; defaults to the run directory's MLE generator.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Captions per clip.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Evaluation)]
    pub split: SplitArg,
    /// Output JSON-lines file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON-lines caption file.
    #[arg(long, value_name = "FILE")]
    pub captions: PathBuf,
    /// Directory written by `prepare-data`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Evaluation)]
    pub split: SplitArg,
    /// Report JSON path; defaults to `<captions stem>.report.json`.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write per-clip metrics as CSV.
    #[arg(long, value_name = "FILE")]
    pub per_clip_csv: Option<PathBuf>,
}
