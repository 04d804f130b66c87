//! Provenance records written next to every command's outputs.
//!
//! A record holds the command, the binary version, the resolved
//! configuration and the input paths. It carries no timestamps, so a rerun
//! with the same inputs writes the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub workers: usize,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &str, workers: usize) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("LPCAM_GIT_DESCRIBE"),
            workers,
            inputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config).context("serializing the configuration")?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `provenance.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(PROVENANCE_FILE);
        std::fs::write(&path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }
}
