use std::path::PathBuf;

use atbsn_core::ensemble::EnsembleSpec;
use atbsn_core::pd::PdFactor;
use atbsn_core::synth::CleanKind;
use atbsn_core::train::Method;
use atbsn_core::BlindSpot;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the default worker count for `sweep` and `distill`.
pub const WORKERS_ENV: &str = "ATBSN_WORKERS";

/// Asymmetric tunable blind-spot denoising experiments.
///
/// Exit codes: 0 success, 1 user error (bad flags, paths or files), 2 numerical failure
/// (non-finite loss during training).
#[derive(Debug, Parser)]
#[command(name = "atbsn", version)]
pub struct Cli {
    /// Seed for every random stream; overrides seeds given in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON file with `model`, `train`, `data` and `kset` sections; flags override it.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,

    /// Directory for artifacts that are not given an explicit path.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of clean/noisy pairs with manifests.
    GenData(GenDataArgs),
    /// Train a blind-spot network (asymmetric blind spot or the PD baseline).
    Train(TrainCmd),
    /// Denoise one image with a single blind-spot size, the PD pipeline, or a plain UNet.
    Denoise(DenoiseArgs),
    /// Denoise one image by averaging predictions over several blind-spot sizes.
    Ensemble(EnsembleArgs),
    /// Distill a teacher's self-ensemble into a plain UNet.
    Distill(DistillArgs),
    /// Measure the spatial correlation of noise residuals.
    ProfileNoise(ProfileNoiseArgs),
    /// Effective receptive field of one output pixel.
    Erf(ErfArgs),
    /// PSNR/SSIM table over a manifest.
    Eval(EvalArgs),
    /// Parameter and multiply-accumulate counts.
    Complexity(ComplexityArgs),
    /// Train over several training blind spots and evaluate each over several inference sizes.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoisePreset {
    /// 3×3 Gaussian kernel.
    Default,
    /// 5×5 Gaussian kernel.
    Wide,
    /// Pixel-independent.
    Iid,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of training images.
    #[arg(long)]
    pub train: Option<usize>,
    /// Number of validation images.
    #[arg(long)]
    pub val: Option<usize>,
    /// Square image edge in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Channels per image.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Clean image family: gradient, checker[:period], blobs or mixed.
    #[arg(long)]
    pub kind: Option<CleanKind>,
    /// Noise kernel preset.
    #[arg(long, value_enum)]
    pub noise: Option<NoisePreset>,
    /// Noise standard deviation on the [0, 1] scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Signal-dependent variance coefficient.
    #[arg(long)]
    pub signal_dependence: Option<f64>,
    /// Skip the 8-bit netpbm preview copies.
    #[arg(long)]
    pub no_previews: bool,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// Trunk width.
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Width of the 1×1 head.
    #[arg(long)]
    pub head_channels: Option<usize>,
    /// Number of 2× poolings in the UNet.
    #[arg(long)]
    pub pool_levels: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Optimizer steps.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Crops per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square crop edge.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Steps between learning-rate halvings.
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Disable random flips and rotations of crops.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Training manifest (only the noisy images are read).
    #[arg(long, value_name = "JSON")]
    pub data: PathBuf,
    /// atbsn or apbsn.
    #[arg(long)]
    pub method: Option<Method>,
    /// Training blind-spot size (odd, or 0).
    #[arg(long)]
    pub k_train: Option<BlindSpot>,
    /// PD factor for apbsn training.
    #[arg(long)]
    pub pd_train: Option<PdFactor>,
    /// Checkpoint path [default: <out-dir>/model.ckpt]; the loss trace goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InferMethod {
    /// Blind-spot network at size --k.
    Atbsn,
    /// PD with factor --pd-infer around the k = 1 network.
    Apbsn,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image (.ppm, .pgm or tensor dump).
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output image; netpbm outputs are clamped to [0, 1].
    #[arg(long)]
    pub out: PathBuf,
    /// Inference method for blind-spot checkpoints.
    #[arg(long, value_enum, default_value = "atbsn")]
    pub method: InferMethod,
    /// Inference blind-spot size.
    #[arg(long, default_value = "1")]
    pub k: BlindSpot,
    /// PD factor for apbsn inference.
    #[arg(long, default_value = "2")]
    pub pd_infer: PdFactor,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated blind-spot sizes [default: 0,1,3,5].
    #[arg(long)]
    pub kset: Option<EnsembleSpec>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Trained blind-spot checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Comma-separated blind-spot sizes for the teacher ensemble [default: 0,1,3,5].
    #[arg(long)]
    pub kset: Option<EnsembleSpec>,
    /// Student checkpoint path [default: <out-dir>/student.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Noisy images to distill on [default: the teacher's training manifest].
    #[arg(long, value_name = "JSON")]
    pub data: Option<PathBuf>,
    /// Teacher target cache [default: <out-dir>/teacher_cache].
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Recompute teacher targets without touching any cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Threads for teacher inference [default: $ATBSN_WORKERS or 1].
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ProfileNoiseArgs {
    /// Manifest with clean/noisy pairs.
    #[arg(long, value_name = "JSON")]
    pub data: PathBuf,
    /// Largest offset per axis.
    #[arg(long, default_value_t = 4)]
    pub radius: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ErfMethod {
    Atbsn,
    Nbsn,
    Apbsn,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "atbsn")]
    pub method: ErfMethod,
    /// Blind-spot size for atbsn.
    #[arg(long, default_value = "7")]
    pub k: BlindSpot,
    /// PD factor for apbsn.
    #[arg(long, default_value = "5")]
    pub pd: PdFactor,
    /// Probe image [default: a synthetic noisy image of --size].
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Edge of the synthetic probe image.
    #[arg(long, default_value_t = 60)]
    pub size: usize,
    /// Output pixel as `row,col` [default: image centre].
    #[arg(long)]
    pub pixel: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMethod {
    /// The noisy input itself.
    Noisy,
    /// Blind-spot network at size --k.
    Atbsn,
    /// PD with factor --pd-infer around the k = 1 network.
    Apbsn,
    /// Average over --kset.
    Ensemble,
    /// Plain UNet checkpoint.
    Nbsn,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest with clean/noisy pairs.
    #[arg(long, value_name = "JSON")]
    pub data: PathBuf,
    /// Checkpoint; required for every method except noisy.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "atbsn")]
    pub method: EvalMethod,
    #[arg(long, default_value = "1")]
    pub k: BlindSpot,
    #[arg(long, default_value = "2")]
    pub pd_infer: PdFactor,
    /// Comma-separated blind-spot sizes [default: 0,1,3,5].
    #[arg(long)]
    pub kset: Option<EnsembleSpec>,
    /// CSV path [default: <out-dir>/eval.csv].
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Square input edge.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Image channels.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Comma-separated blind-spot sizes of the ensemble [default: 0,1,3,5].
    #[arg(long)]
    pub kset: Option<EnsembleSpec>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Training manifest.
    #[arg(long, value_name = "JSON")]
    pub data: PathBuf,
    /// Validation manifest with clean/noisy pairs.
    #[arg(long, value_name = "JSON")]
    pub val: PathBuf,
    /// Comma-separated training blind-spot sizes.
    #[arg(long, value_delimiter = ',', default_value = "5,7,9")]
    pub ka: Vec<BlindSpot>,
    /// Comma-separated inference blind-spot sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,3,7")]
    pub kb: Vec<BlindSpot>,
    /// Concurrent trainings [default: $ATBSN_WORKERS or 1].
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}
