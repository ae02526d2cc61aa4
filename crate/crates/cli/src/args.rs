use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use spotdiff::clustering::{DEFAULT_EPS, DEFAULT_MIN_PTS, DEFAULT_SIGMA};
use spotdiff::corpus::{DEFAULT_MIN_COUNT, DEFAULT_PAIRS_PER_VIDEO, DEFAULT_SECOND_SUFFIX, DEFAULT_VIDEO_PATTERN};
use spotdiff::decoder::params::{DEFAULT_ATTENTION_DIM, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM};
use spotdiff::decoder::DEFAULT_MAX_LEN;
use spotdiff::encoder::DEFAULT_GRID;
use spotdiff::imaging::{DEFAULT_DELTA, DEFAULT_MAX_SHIFT};
use spotdiff::pipeline::VisionConfig;
use spotdiff::training::Mode;

#[derive(Parser, Debug)]
#[command(name = "spotdiff", version, about = "Describe the differences between two similar images", args_override_self = true)]
pub struct Cli {
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register pairs, cluster differences and cache model inputs.
    Preprocess(PreprocessArgs),
    /// Like preprocess, with externally computed feature grids.
    ImportFeatures(PreprocessArgs),
    /// Copy cached feature grids out as one file per pair.
    ExportFeatures(ExportArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Describe one pair.
    Generate(GenerateArgs),
    /// Score a model (or the nearest-neighbor baseline) on a split.
    Evaluate(EvaluateArgs),
    /// Predict which cluster each sentence describes and score against gold.
    Align(AlignArgs),
    /// Draw difference clusters over the first image.
    Inspect(InspectArgs),
    /// Corpus statistics for an annotation file.
    Stats(StatsArgs),
    /// Sample frame pairs from a video directory and filter them by distance.
    ExtractPairs(ExtractArgs),
    /// Write a synthetic corpus with known changes.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct VisionArgs {
    /// Per-pixel color distance threshold.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_SHIFT)]
    pub max_shift: usize,
    /// DBSCAN neighborhood radius in pixels.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
    pub min_pts: usize,
    /// Gaussian blur applied before projecting masks; 0 disables it.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Feature grid side for the built-in encoder.
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
}

impl VisionArgs {
    pub fn config(&self) -> VisionConfig {
        VisionConfig {
            delta: self.delta,
            max_shift: self.max_shift,
            eps: self.eps,
            min_pts: self.min_pts,
            sigma: self.sigma,
            grid_h: self.grid,
            grid_w: self.grid,
        }
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let ratios: [f64; 3] = parts.try_into().map_err(|_| "expected three comma-separated ratios".to_string())?;
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err("ratios must be non-negative and sum to 1".into());
    }
    Ok(ratios)
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Regex whose first group extracts the video id from an image id.
    #[arg(long, default_value = DEFAULT_VIDEO_PATTERN)]
    pub video_pattern: String,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Train, validation and test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
    pub split_ratios: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub img_dir: PathBuf,
    /// Suffix of the second image's file name.
    #[arg(long, default_value = DEFAULT_SECOND_SUFFIX)]
    pub second_suffix: String,
    /// Directory of `<img_id>.sdf` feature files to use instead of the
    /// built-in encoder.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Cache directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vision: VisionArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value = "ddla")]
    pub mode: Mode,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN_DIM)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = DEFAULT_ATTENTION_DIM)]
    pub attention_dim: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Suppress per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Cache to read the pair from (with --img-id).
    #[arg(long, requires = "img_id")]
    pub cache: Option<PathBuf>,
    #[arg(long, requires = "cache")]
    pub img_id: Option<String>,
    /// Raw first image (with --img2); processed with the model's settings.
    #[arg(long, requires = "img2", conflicts_with = "cache")]
    pub img1: Option<PathBuf>,
    #[arg(long, requires = "img1")]
    pub img2: Option<PathBuf>,
    /// More than one gives one sentence per ranked cluster.
    #[arg(long, default_value_t = 1)]
    pub num_sentences: usize,
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Checkpoint; not needed with --baseline nn.
    #[arg(long, required_unless_present = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cache: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub on: String,
    #[arg(long, value_parser = ["nn"])]
    pub baseline: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every generated description.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AlignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// JSON array of {img_id, sentence_index, cluster_id}.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    #[arg(long)]
    pub img1: PathBuf,
    #[arg(long)]
    pub img2: PathBuf,
    /// Overlay PNG path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vision: VisionArgs,
}

#[derive(Args, Debug, Clone)]
pub struct StatsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Occurrences that make a word type frequent.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub frequent_min: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ExtractArgs {
    #[arg(long)]
    pub frame_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PAIRS_PER_VIDEO)]
    pub count: usize,
    #[arg(long)]
    pub l2_lower: f64,
    #[arg(long)]
    pub l2_upper: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub per_video: usize,
    #[arg(long, default_value_t = 2)]
    pub objects: usize,
    #[arg(long, default_value_t = 2)]
    pub described: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub vision: VisionArgs,
}
