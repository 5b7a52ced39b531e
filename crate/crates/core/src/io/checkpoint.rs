//! Checkpoints: one line of JSON metadata, then one tensor dump per parameter in registry order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dump::{decode_tensor, encode_tensor};
use super::{read_bytes, write_bytes};
use crate::autograd::ParamStore;
use crate::bsn::{BsnConfig, BsnModel, NbsnModel};
use crate::error::{Error, Result};
use crate::tensor::Float;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bsn,
    Nbsn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dims: [usize; 4],
}

/// Teacher settings a distilled student was trained against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillMeta {
    pub teacher_kset: Vec<usize>,
    pub teacher_config: BsnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: BsnConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    /// Optimizer steps taken.
    pub iteration: usize,
    /// Training protocol, including the training blind spot and optimizer settings.
    pub training: Option<TrainConfig>,
    pub distill: Option<DistillMeta>,
    /// Manifest of the noisy images the model was trained on, as given on the command line.
    #[serde(default)]
    pub train_data: Option<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<T: Float>(
        kind: ModelKind,
        config: BsnConfig,
        init_seed: u64,
        params: &ParamStore<T>,
    ) -> Self {
        let params = params.cast::<f32>();
        let entries = params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                dims: p.dims().as_array(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind,
                config,
                init_seed,
                iteration: 0,
                training: None,
                distill: None,
                train_data: None,
                params: entries,
            },
            params,
        }
    }

    pub fn from_bsn<T: Float>(model: &BsnModel<T>, init_seed: u64) -> Self {
        Self::new(ModelKind::Bsn, *model.config(), init_seed, model.params())
    }

    pub fn from_nbsn<T: Float>(model: &NbsnModel<T>, init_seed: u64) -> Self {
        Self::new(ModelKind::Nbsn, *model.config(), init_seed, model.params())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::invalid(format!(
                "checkpoint holds a {:?} model, expected {:?}",
                self.header.kind, kind
            )));
        }
        Ok(())
    }

    pub fn bsn<T: Float>(&self) -> Result<BsnModel<T>> {
        self.expect_kind(ModelKind::Bsn)?;
        BsnModel::from_params(self.header.config, self.params.cast())
    }

    pub fn nbsn<T: Float>(&self) -> Result<NbsnModel<T>> {
        self.expect_kind(ModelKind::Nbsn)?;
        NbsnModel::from_params(self.header.config, self.params.cast())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for p in self.params.iter() {
            out.extend_from_slice(&encode_tensor(&p.value));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader {
                offset: 0,
                reason: "checkpoint header line is not terminated".into(),
            })?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl])?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::MalformedHeader {
                offset: 0,
                reason: "missing format_version".into(),
            })?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(raw)?;
        let mut params = ParamStore::new();
        let mut pos = nl + 1;
        for e in &header.params {
            let (t, used) = decode_tensor(&bytes[pos..]).map_err(|err| match err {
                Error::Truncated { offset, expected, found } => Error::Truncated {
                    offset: pos + offset,
                    expected,
                    found,
                },
                other => other,
            })?;
            if t.dims().as_array() != e.dims {
                return Err(Error::CheckpointDims {
                    name: e.name.clone(),
                    found: t.dims().as_array(),
                    expected: e.dims,
                });
            }
            params.add(e.name.clone(), t);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(Error::MalformedHeader {
                offset: pos,
                reason: format!("{} trailing bytes after the last tensor", bytes.len() - pos),
            });
        }
        let ckpt = Checkpoint { header, params };
        // Reject tensors that disagree with the declared architecture.
        match ckpt.header.kind {
            ModelKind::Bsn => ckpt.bsn::<f32>().map(drop)?,
            ModelKind::Nbsn => ckpt.nbsn::<f32>().map(drop)?,
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Decode {
            path: path.into(),
            source: Box::new(other),
        },
    })
}
