//! The run manifest: everything needed to re-evaluate a finished run.

use std::path::Path;

use fedseg_core::datastore::{ClientSpec, PhantomConfig};
use fedseg_core::fedsim::FedConfig;
use fedseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub fed: FedConfig,
    pub phantom: PhantomConfig,
    pub roster: Vec<ClientSpec>,
    pub data_dir: String,
    pub out_dir: String,
    /// FNV-1a of the canonical config text.
    pub config_fingerprint: String,
    /// FNV-1a of the crate name and version the run was produced with.
    pub code_fingerprint: String,
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn code_fingerprint() -> String {
    let tag = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    format!("{:016x}", fnv64(tag.as_bytes()))
}

impl RunManifest {
    pub fn from_config(cfg: &RunConfig) -> Self {
        RunManifest {
            fed: cfg.fed.clone(),
            phantom: cfg.phantom.clone(),
            roster: cfg.client_specs(),
            data_dir: cfg.data_dir.display().to_string(),
            out_dir: cfg.out_dir.display().to_string(),
            config_fingerprint: format!(
                "{:016x}",
                fnv64(cfg.to_config_string().as_bytes())
            ),
            code_fingerprint: code_fingerprint(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_fingerprints_are_stable() {
        let cfg = RunConfig::parse(
            "[federation]\nrounds = 2\nseed = 5\n[clients]\nroster = 5:MR_T1\n",
        )
        .unwrap();
        let m = RunManifest::from_config(&cfg);
        let m2 = RunManifest::from_config(&cfg);
        assert_eq!(m.config_fingerprint, m2.config_fingerprint);
        assert_eq!(m.code_fingerprint, m2.code_fingerprint);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back.fed, m.fed);
        assert_eq!(back.roster.len(), 1);
        assert_eq!(back.config_fingerprint, m.config_fingerprint);
    }
}
