use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use jointmatch::Method;

#[derive(Debug, Parser)]
#[command(name = "jointmatch", version, about = "Paired region-of-interest detection in bilateral images")]
pub struct Cli {
    /// Configuration file (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for training, augmentation and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic suite with templates and ground truth.
    Synth(SynthArgs),
    /// Split a bilateral image into two processed halves.
    Preprocess(PreprocessArgs),
    /// Detect the template in both halves of one input.
    Detect(DetectArgs),
    /// Train the two-stage localization network.
    Train(TrainArgs),
    /// Compare methods over a directory of half pairs.
    Eval(EvalArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Also write each pair as one bilateral image.
    #[arg(long)]
    pub bilateral: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the two halves come from.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// A bilateral image, split before matching.
    #[arg(long, conflicts_with_all = ["left", "right"], required_unless_present_all = ["left", "right"])]
    pub input: Option<PathBuf>,
    /// An already processed left half (flipped to the right-side orientation).
    #[arg(long, requires = "right")]
    pub left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    pub right: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Template bundle directory (patch.png and template.json).
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Coarse template bundle used by the first network stage.
    #[arg(long)]
    pub coarse_template: Option<PathBuf>,
    /// Trained model file, required by the neural methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Detection JSON output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for overlay PNGs.
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `*_left.png` / `*_right.png` pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub coarse_template: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training-curve JSON to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Outer iterations T.
    #[arg(long)]
    pub outer: Option<usize>,
    /// Epochs per outer iteration M.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub lr_head: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub coarse_template: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated methods; defaults to every method the inputs allow.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<Method>,
    /// Markdown table output; stdout when absent.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-pair results as JSON.
    #[arg(long)]
    pub details: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: jointmatch::Error| e.to_string())
}
