//! Noise correlation maps, effective receptive fields and image-quality metrics.

mod corr;
mod erf;
mod metrics;

pub use corr::{noise_correlation, NoiseCorrMap, MIN_SAMPLES};
pub use erf::{erf_map, ErfMap, ErfPipeline};
pub use metrics::{mean_quality, psnr, ssim, PSNR_CAP};
