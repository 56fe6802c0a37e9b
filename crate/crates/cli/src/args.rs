use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "posemap", version, about = "Probability-map keypoint evaluation, decoding and dataset tools")]
pub struct Cli {
    /// key=value file supplying defaults for any long option.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Per-keypoint kappa overrides (name=value lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub kappa_table: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// OKS mAP of predictions against ground truth.
    Eval(EvalArgs),
    /// Ex-OKS mAP with a presence-threshold sweep.
    Exeval(ExevalArgs),
    /// Decode PMAP files into keypoint predictions.
    Decode(DecodeArgs),
    /// Generate a cropped, presence-annotated ground-truth set.
    Cropgen(CropgenArgs),
    /// Fit a map temperature and report coverage histograms.
    Calibrate(CalibrateArgs),
    /// Fit probability maps to a target by gradient descent.
    Fit(FitArgs),
    /// Presence-probability and confidence threshold sweeps.
    Sweep(SweepArgs),
    /// Percentages of labeled keypoints per area A-E.
    Areas(AreasArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Argmax,
    Udp,
    ExpectedOks,
    DoubleHeatmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizerArg {
    Sparsemax,
    Softmax,
}

#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    /// Box padding factor before aspect expansion.
    #[arg(long)]
    pub padding: Option<f64>,
    #[arg(long)]
    pub grid_w: Option<usize>,
    #[arg(long)]
    pub grid_h: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExevalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Fixed presence threshold; the sweep optimum when omitted.
    #[arg(long)]
    pub presence_threshold: Option<f64>,
    /// Subsample the majority class with this seed before sweeping.
    #[arg(long)]
    pub balance_seed: Option<u64>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep curve CSV.
    #[arg(long)]
    pub sweep_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// PMAP files, one instance each.
    #[arg(long, required = true)]
    pub pmap: Vec<PathBuf>,
    /// Expert-window PMAP files for double-heatmap decoding, aligned with --pmap.
    #[arg(long)]
    pub expert: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Object scale in px; estimated from the window when omitted.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub presence_threshold: Option<f64>,
    #[arg(long)]
    pub image_id: Option<u64>,
    #[arg(long)]
    pub padding: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CropgenArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Output ground-truth JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Crop manifest CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dropped-instance CSV.
    #[arg(long)]
    pub dropped: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Smallest retained side fraction.
    #[arg(long)]
    pub strength_min: Option<f64>,
    /// Largest retained side fraction.
    #[arg(long)]
    pub strength_max: Option<f64>,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Ground truth for PMAP-backed predictions.
    #[arg(long, requires = "pred", conflicts_with = "synthetic")]
    pub gt: Option<PathBuf>,
    /// Predictions whose entries reference PMAP files.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Use this many synthetic calibrated samples instead of files.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Temperature applied to synthetic maps before fitting.
    #[arg(long, requires = "synthetic")]
    pub corrupt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Temperature grid: lo:hi:n (log-spaced) or a comma list.
    #[arg(long)]
    pub t_grid: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coverage histograms before and after scaling.
    #[arg(long)]
    pub histogram_csv: Option<PathBuf>,
    /// Objective at every grid temperature.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Target x in window pixels.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<f64>,
    /// Target y in window pixels.
    #[arg(long, allow_hyphen_values = true)]
    pub y: Option<f64>,
    /// Keypoint name or index selecting kappa.
    #[arg(long)]
    pub keypoint: Option<String>,
    /// Explicit kappa, overriding --keypoint.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Fit every keypoint type and tabulate sharpness.
    #[arg(long)]
    pub all_keypoints: bool,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_enum)]
    pub normalizer: Option<NormalizerArg>,
    /// Random initial logits in [-s, s]; requires --seed.
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid_w: Option<usize>,
    #[arg(long)]
    pub grid_h: Option<usize>,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Fitted map(s) as PMAP.
    #[arg(long)]
    pub pmap_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub balance_seed: Option<u64>,
    /// Reliability-diagram bins.
    #[arg(long)]
    pub bins: Option<usize>,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Accuracy per threshold for presence and confidence.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
    #[arg(long)]
    pub reliability_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AreasArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}
