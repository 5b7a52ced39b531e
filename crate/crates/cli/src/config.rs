use std::path::Path;

use atbsn_core::ensemble::EnsembleSpec;
use atbsn_core::io::read_bytes;
use atbsn_core::synth::DatasetSpec;
use atbsn_core::train::TrainConfig;
use atbsn_core::{BsnConfig, Error, Result};
use serde::{Deserialize, Serialize};

use crate::cli::{ModelArgs, TrainArgs, WORKERS_ENV};

/// Contents of a `--config` file. Every section and field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: BsnConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub kset: EnsembleSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(RunConfig::default());
        };
        serde_json::from_slice(&read_bytes(p)?).map_err(|e| Error::Decode {
            path: p.into(),
            source: Box::new(e.into()),
        })
    }
}

impl ModelArgs {
    pub fn apply(&self, mut m: BsnConfig) -> BsnConfig {
        if let Some(v) = self.base_channels {
            m.base_channels = v;
        }
        if let Some(v) = self.head_channels {
            m.head_channels = v;
        }
        if let Some(v) = self.pool_levels {
            m.pool_levels = v;
        }
        m
    }
}

impl TrainArgs {
    pub fn apply(&self, mut t: TrainConfig, seed: Option<u64>) -> TrainConfig {
        if let Some(v) = self.iters {
            t.iters = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.patch {
            t.patch = v;
        }
        if let Some(v) = self.decay_every {
            t.decay_every = v;
        }
        if self.no_augment {
            t.augment = false;
        }
        if let Some(s) = seed {
            t.seed = s;
        }
        t
    }
}

/// `--workers`, else the environment default, else 1.
pub fn workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV}=`{v}` is not a count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::InvalidArgument("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Prints the settings a command is about to use.
pub fn announce(command: &str, seed: u64, resolved: &impl Serialize) {
    let json = serde_json::to_string(resolved).expect("config serializes");
    eprintln!("{command}: seed {seed}");
    eprintln!("{command}: config {json}");
}
