use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kist::model::ModelConfig;
use kist::postfilter::GuidedFilterConfig;
use kist::selftrain::KistConfig;

#[derive(Debug, Parser)]
#[command(name = "kist", version, about = "Knowledge-informed self-training for anomaly localization")]
pub struct Cli {
    /// Parameter profile.
    #[arg(long, value_enum, default_value_t = Profile::Desk, global = true)]
    pub profile: Profile,

    #[arg(long, default_value_t = 7, global = true)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic texture dataset.
    Synth(SynthArgs),
    /// Pretrain on normals, then run self-training iterations.
    Train(TrainArgs),
    /// Residual maps, filtered maps and overlays for a set of images.
    Infer(InferArgs),
    /// AUROC and AUPRO of score maps against ground-truth masks.
    Eval(EvalArgs),
    /// Per-region properties and rule grades.
    Grade(GradeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 64x64, 50 epochs, 3 iterations, filter radius 4.
    Desk,
    /// 256x256, 200 epochs, 5 iterations, filter radius 16.
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn model(self, seed: u64) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(seed),
            Profile::Paper => ModelConfig::paper(seed),
        }
    }

    pub fn kist(self, seed: u64) -> KistConfig {
        match self {
            Profile::Desk => KistConfig::desk(seed),
            Profile::Paper => KistConfig::paper(seed),
        }
    }

    pub fn filter(self) -> GuidedFilterConfig {
        match self {
            Profile::Desk => GuidedFilterConfig::desk(),
            Profile::Paper => GuidedFilterConfig::paper(),
        }
    }

    pub fn size(self) -> usize {
        self.model(0).input_size
    }
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Guided filter window radius (profile default when omitted).
    #[arg(long)]
    pub gf_radius: Option<usize>,

    /// Guided filter regularization (profile default when omitted).
    #[arg(long)]
    pub gf_eps: Option<f64>,

    /// Skip guided-filter post-processing.
    #[arg(long)]
    pub no_postprocess: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,

    /// Image side (profile default when omitted).
    #[arg(long)]
    pub size: Option<usize>,

    #[arg(long, default_value_t = 60)]
    pub normals: usize,

    #[arg(long, default_value_t = 3)]
    pub anomalous: usize,

    #[arg(long, default_value_t = 20)]
    pub test: usize,

    /// Std of Gaussian pixel noise added to test images.
    #[arg(long, default_value_t = 0.0)]
    pub test_noise: f64,

    /// Family fractions, e.g. `large-dark-blob=0.5,dark-slender-scratch=0.5`.
    #[arg(long)]
    pub mix: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset root with normal/, anomalous/ and optionally test/.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub out: PathBuf,

    /// Rule file path, or one of the built-in sets `kole-mvtec` and `mtd`.
    #[arg(long, default_value = "kole-mvtec")]
    pub rules: String,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// Epochs of both phases.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Skip held-out evaluation on the test split.
    #[arg(long)]
    pub no_eval: bool,

    #[arg(long, default_value_t = kist::metrics::DEFAULT_FPR_LIMIT)]
    pub fpr_limit: f64,

    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Dataset root; its normal/ images set the overlay threshold.
    #[arg(long)]
    pub data: PathBuf,

    /// Images to score (defaults to <data>/test/images).
    #[arg(long)]
    pub images: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub filter: FilterArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory of `.f32` score maps named after the masks.
    #[arg(long)]
    pub scores: PathBuf,

    #[arg(long)]
    pub masks: PathBuf,

    #[arg(long, default_value_t = kist::metrics::DEFAULT_FPR_LIMIT)]
    pub fpr_limit: f64,

    /// Line-delimited report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradeArgs {
    #[arg(long)]
    pub image: PathBuf,

    /// Binary mask PNG whose regions are graded.
    #[arg(long, conflicts_with_all = ["residual", "threshold"])]
    pub mask: Option<PathBuf>,

    /// `.f32` residual map, binarized at `--threshold`.
    #[arg(long, requires = "threshold")]
    pub residual: Option<PathBuf>,

    #[arg(long, requires = "residual")]
    pub threshold: Option<f64>,

    #[arg(long, default_value = "kole-mvtec")]
    pub rules: String,

    #[arg(long)]
    pub report: Option<PathBuf>,
}
