//! File formats: tensor dumps, binary PPM/PGM, checkpoints, dataset manifests and heatmaps.

mod checkpoint;
mod dump;
mod manifest;
mod pnm;

use std::path::Path;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, DistillMeta, ModelKind,
    ParamEntry, CHECKPOINT_VERSION,
};
pub use dump::{decode_tensor, encode_tensor, TENSOR_MAGIC, TENSOR_VERSION};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Split};
pub use pnm::{decode_pnm, encode_pnm, write_heatmap, BitDepth, HeatmapSidecar};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// On-disk image encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// P6 for 3 channels, P5 for 1.
    Pnm(BitDepth),
    TensorDump,
}

impl ImageFormat {
    /// `.ppm`/`.pgm` are 8-bit netpbm, anything else a tensor dump.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm" | "pgm" | "pnm") => ImageFormat::Pnm(BitDepth::Eight),
            _ => ImageFormat::TensorDump,
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temporary file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a netpbm or tensor-dump image, detected from its leading bytes.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    let decoded = if bytes.starts_with(TENSOR_MAGIC) {
        decode_tensor(&bytes).map(|(t, _)| t)
    } else {
        decode_pnm(&bytes)
    };
    decoded.map_err(|e| Error::Decode {
        path: path.into(),
        source: Box::new(e),
    })
}

pub fn write_image<T: Float>(path: &Path, image: &Tensor<T>, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pnm(depth) => encode_pnm(image, depth)?,
        ImageFormat::TensorDump => encode_tensor(image),
    };
    write_bytes(path, &bytes)
}
