use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, read_image, write_bytes};
use crate::error::{Error, Result};
use crate::synth::NoiseSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noisy: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, seed: u64, noise: NoiseSpec, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            split,
            seed,
            noise,
            entries,
            base: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base
    }

    pub fn noisy_path(&self, i: usize) -> PathBuf {
        self.base.join(&self.entries[i].noisy)
    }

    pub fn clean_path(&self, i: usize) -> PathBuf {
        self.base.join(&self.entries[i].clean)
    }

    pub fn noisy_paths(&self) -> Vec<PathBuf> {
        (0..self.len()).map(|i| self.noisy_path(i)).collect()
    }

    /// Decodes only the noisy side.
    pub fn load_noisy(&self) -> Result<Vec<Tensor<f32>>> {
        self.noisy_paths().iter().map(|p| read_image(p)).collect()
    }

    /// Decodes `(clean, noisy)` pairs.
    pub fn load_pairs(&self) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        (0..self.len())
            .map(|i| Ok((read_image(&self.clean_path(i))?, read_image(&self.noisy_path(i))?)))
            .collect()
    }
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_bytes(path)?;
    let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
    m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if m.entries.is_empty() {
        return Err(Error::invalid(format!("{}: manifest has no entries", path.display())));
    }
    for i in 0..m.len() {
        for p in [m.clean_path(i), m.noisy_path(i)] {
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    Ok(m)
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
