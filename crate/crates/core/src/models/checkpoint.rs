use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Denoiser, Network, TrajectoryModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Denoiser,
    Trajectory,
}

/// Versioned on-disk form of a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: ModelRole,
    pub network: Network,
    pub config_hash: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn from_denoiser(d: &Denoiser, config_hash: impl Into<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role: ModelRole::Denoiser,
            network: d.net.clone(),
            config_hash: config_hash.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_trajectory(m: &TrajectoryModel, config_hash: impl Into<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role: ModelRole::Trajectory,
            network: m.net.clone(),
            config_hash: config_hash.into(),
            metadata: BTreeMap::new(),
        }
    }

    /// Hash of the parameter bytes, stable across serialization round trips.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.network.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        let net = &ck.network;
        Network::from_parts(net.arch.clone(), net.sigma_data, net.params.clone())?;
        Ok(ck)
    }

    pub fn into_denoiser(self) -> Result<Denoiser> {
        match self.role {
            ModelRole::Denoiser => Ok(Denoiser { net: self.network }),
            ModelRole::Trajectory => Err(Error::Config("checkpoint holds a trajectory model".into())),
        }
    }

    pub fn into_trajectory(self) -> Result<TrajectoryModel> {
        match self.role {
            ModelRole::Trajectory => Ok(TrajectoryModel { net: self.network }),
            ModelRole::Denoiser => Err(Error::Config("checkpoint holds a denoiser".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::numerics::RandomStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::mlp(2, vec![8, 8], 2, 2);
        let mut rng = RandomStream::new(3, 0);
        let mut m = TrajectoryModel::new(arch, 1.5, &mut rng).unwrap();
        for p in &mut m.net.params {
            *p = rng.normal_tensor(p.rows(), p.cols()).reshape(p.shape().to_vec()).unwrap();
        }
        let ck = Checkpoint::from_trajectory(&m, "abc");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params_hash(), ck.params_hash());
        assert!(back.clone().into_denoiser().is_err());
        assert_eq!(back.into_trajectory().unwrap(), m);
    }

    #[test]
    fn wrong_version_is_config_error() {
        let arch = Architecture::mlp(1, vec![4], 1, 1);
        let d = Denoiser::new(arch, 1.0, &mut RandomStream::new(0, 0)).unwrap();
        let mut ck = Checkpoint::from_denoiser(&d, "");
        ck.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().is_config());
    }
}
