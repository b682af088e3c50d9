//! Run manifests: every command writes one `manifest.json` next to its
//! outputs carrying the fully resolved configuration, the input and output
//! paths, the seed(s) and timestamps — enough to reproduce the run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use kdar::util::write_file;
use kdar::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub seeds: Vec<u64>,
    /// Fully resolved configuration: file values and flag overrides merged,
    /// defaults materialized.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub struct ManifestBuilder {
    command: String,
    started_at: String,
    seeds: Vec<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            seeds: Vec::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seeds(mut self, seeds: &[u64]) -> Self {
        self.seeds = seeds.to_vec();
        self
    }

    pub fn config<C: Serialize>(mut self, config: &C) -> Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Stamp the end time and write `manifest.json` into `out_dir`.
    pub fn write(self, out_dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            seeds: self.seeds,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = out_dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&path, &body)
    }
}
