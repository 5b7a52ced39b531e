//! Asymmetric tunable blind-spot networks for self-supervised denoising of
//! spatially-correlated noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense tensors with a recorded graph and exact gradients,
//!   including the half-plane (shifted) convolution and pooling layers.
//! * [`bsn`]: the four-branch blind-spot network whose blind-spot size is chosen per call,
//!   and the plain UNet it distils into.
//! * [`pd`]: pixel-shuffle downsampling and the PD-based baseline objective.
//! * [`analysis`]: noise correlation maps, effective receptive fields, PSNR and SSIM.
//! * [`synth`]: procedural clean images and spatially-correlated noise.
//! * [`train`] and [`ensemble`]: training loops, blind-spot self-ensemble, distillation.
//! * [`io`]: tensor dumps, PPM/PGM, checkpoints and manifests.

pub mod analysis;
pub mod autograd;
pub mod bsn;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod pd;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, ParamStore, Var};
pub use bsn::{BlindSpot, BsnConfig, BsnModel, NbsnModel};
pub use error::{Error, Result};
pub use tensor::{Dims, Float, Tensor};
