//! Run manifests: enough to reproduce a command's outputs on one platform.

use std::collections::BTreeMap;
use std::path::Path;

use mediate_core::io::SCHEMA_VERSION;
use mediate_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads_env: Option<String>,
    /// File name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn name_of(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

impl Manifest {
    pub fn new(command: &str, config: &Path, seed: u64) -> Result<Self> {
        Ok(Manifest {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config_sha256: sha256_file(config)?,
            seed,
            threads_env: std::env::var("MEDIATE_THREADS").ok(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, p: &Path) -> Result<()> {
        self.inputs.insert(name_of(p), sha256_file(p)?);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> Result<()> {
        self.outputs.insert(name_of(p), sha256_file(p)?);
        Ok(())
    }

    /// Writes `manifest_<command>.json` next to the outputs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(format!("manifest_{}.json", self.command.replace('-', "_"))), text)?;
        Ok(())
    }
}
