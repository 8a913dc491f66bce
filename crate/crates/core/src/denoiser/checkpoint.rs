use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "meshcast-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON container of all weights, the frozen Fourier matrix, the network
/// configuration and the hash of the run configuration that produced it.
/// Reals are written in shortest round-trip form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub network: serde_json::Value,
    pub fourier: Vec<f64>,
    pub params: Vec<StoredTensor>,
    /// Caller state such as optimizer moments and counters.
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_net<T: Real + Serialize>(net: &DenoiserNet<T>, config_hash: &str, extra: serde_json::Value) -> Result<Self> {
        let params = (0..net.params.len())
            .map(|i| StoredTensor {
                name: net.params.name(i).to_string(),
                shape: net.params.shape(i).to_vec(),
                data: net.params.value(i).iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            network: serde_json::to_value(&net.config)?,
            fourier: net.positions.w.iter().map(|v| v.as_f64()).collect(),
            params,
            extra,
        })
    }

    /// Rebuild the network, refusing a foreign config hash.
    pub fn into_net<T: Real + DeserializeOwned>(self, expected_hash: &str) -> Result<(DenoiserNet<T>, serde_json::Value)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.config_hash != expected_hash {
            return Err(Error::ConfigHashMismatch {
                found: self.config_hash,
                expected: expected_hash.into(),
            });
        }
        let config: DenoiserConfig<T> = serde_json::from_value(self.network)?;
        let mut net = DenoiserNet::new(config)?;
        if self.params.len() != net.params.len() || self.fourier.len() != net.positions.w.len() {
            return Err(Error::Parse("checkpoint does not match its network layout".into()));
        }
        for (i, t) in self.params.into_iter().enumerate() {
            if t.name != net.params.name(i) || t.shape != net.params.shape(i) {
                return Err(Error::Parse(format!("checkpoint tensor {} does not match {}", t.name, net.params.name(i))));
            }
            net.params.set(i, t.data.into_iter().map(T::lit).collect())?;
        }
        net.positions.w = self.fourier.into_iter().map(T::lit).collect();
        Ok((net, self.extra))
    }
}

pub fn save_checkpoint<T: Real + Serialize>(path: &Path, net: &DenoiserNet<T>, config_hash: &str, extra: serde_json::Value) -> Result<()> {
    let ck = Checkpoint::from_net(net, config_hash, extra)?;
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real + DeserializeOwned>(path: &Path, expected_hash: &str) -> Result<(DenoiserNet<T>, serde_json::Value)> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    ck.into_net(expected_hash)
}
