use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use weedsense::data::Split;
use weedsense::{ModelConfig, Size, Tasks, UibKernels};

#[derive(Debug, Parser)]
#[command(name = "weedsense", version, about = "Multi-task weed segmentation, height and growth-stage models")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with optional `model`, `train` and `synth` sections; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP profile of a configuration.
    Describe(DescribeArgs),
    /// Write a synthetic dataset (images, masks, manifest).
    Synth(SynthArgs),
    /// Train on a manifest; writes a checkpoint and a CSV loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the splits of a manifest.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Multi-task latency against the three single-task networks.
    Bench(BenchArgs),
    /// Grad-CAM heatmaps per task.
    Gradcam(GradcamArgs),
}

fn channels(s: &str) -> Result<usize, String> {
    match s {
        "64" | "128" | "256" => Ok(s.parse().expect("digits")),
        _ => Err(format!("{s} is not one of 64, 128, 256")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = clap::value_parser!(Size))]
    pub size: Option<Size>,
    /// UIB depthwise kernels, e.g. s0m3e0.
    #[arg(long, value_parser = clap::value_parser!(UibKernels))]
    pub kernel: Option<UibKernels>,
    #[arg(long, overrides_with = "no_se")]
    pub se: bool,
    #[arg(long)]
    pub no_se: bool,
    #[arg(long, overrides_with = "no_aux")]
    pub aux: bool,
    #[arg(long)]
    pub no_aux: bool,
    /// Aggregation width.
    #[arg(long, value_parser = channels)]
    pub channels: Option<usize>,
    /// Comma-separated subset of seg,height,week.
    #[arg(long, value_parser = clap::value_parser!(Tasks))]
    pub tasks: Option<Tasks>,
    /// Divide every channel width (small test networks).
    #[arg(long)]
    pub width_divisor: Option<usize>,
    /// Fixed multiplier on the height head output.
    #[arg(long)]
    pub height_scale: Option<f64>,
}

fn flag(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl ModelArgs {
    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(s) = self.size {
            cfg.size = s;
        }
        if let Some(k) = self.kernel {
            cfg.kernels = k;
        }
        if let Some(se) = flag(self.se, self.no_se) {
            cfg.use_se = se;
        }
        if let Some(aux) = flag(self.aux, self.no_aux) {
            cfg.aux = aux;
        }
        if self.channels.is_some() {
            cfg.agg_channels = self.channels;
        }
        if let Some(t) = self.tasks {
            cfg.tasks = t;
        }
        if let Some(d) = self.width_divisor {
            cfg.width_divisor = d;
        }
        if let Some(h) = self.height_scale {
            cfg.height_scale = h;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 512)]
    pub input_size: usize,
    /// Profile the whole ablation grid instead of one configuration.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub px_per_cm: Option<f64>,
    /// Train, val and test fractions.
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_parser = parse_split, default_value = "1,0,0")]
    pub split: [f64; 3],
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Random scale, crop and flip; `--input-size` sets the crop.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, requires = "augment")]
    pub input_size: Option<usize>,
    /// Uniform segmentation class weights instead of median frequency.
    #[arg(long)]
    pub uniform_weights: bool,
    /// Run the last ITERS iterations with batch norm on its running statistics.
    #[arg(long, value_name = "ITERS")]
    pub bn_freeze: Option<usize>,
    /// Stop after this many iterations in total.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Continue from a checkpoint; model and training flags come from it.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["epochs", "batch", "lr", "warmup", "augment", "uniform_weights", "bn_freeze"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Only this split; default every non-empty split.
    #[arg(long, value_parser = clap::value_parser!(Split))]
    pub split: Option<Split>,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also check the whole tiny network.
    #[arg(long)]
    pub tiny: bool,
    /// Sampled coordinates per parameter tensor in the whole-network check.
    #[arg(long, default_value_t = 2)]
    pub coords: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 512)]
    pub input_size: usize,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    /// Trained weights; without it a freshly initialized model is explained.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Explain a manifest sample (needs `--sample`) instead of a synthetic tall plant.
    #[arg(long, value_name = "PATH", requires = "sample")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub sample: Option<String>,
    /// Side of the synthetic image.
    #[arg(long, default_value_t = 128)]
    pub input_size: usize,
    /// Species of the synthetic plant.
    #[arg(long, default_value_t = 1)]
    pub species: usize,
}

fn parse_split(s: &str) -> Result<[f64; 3], String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three fractions, got {}", v.len()))
}
