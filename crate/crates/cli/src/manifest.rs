//! Run manifests: every command writes one next to its artifacts, carrying
//! enough (command, resolved config, seeds, input/output paths) to reproduce
//! the run bit-exactly, timestamps aside.

use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub resolved_config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub git_describe: String,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, resolved_config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            resolved_config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            git_describe: env!("KBEDIT_GIT_DESCRIBE").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs
            .insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Write `manifest_<command>.json` into `dir` and return its path.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
