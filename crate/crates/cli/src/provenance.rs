//! Sidecar manifests written next to every output file.

use std::path::{Path, PathBuf};

use nest_core::binio::fnv1a64;
use nest_core::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
struct InputRef {
    path: String,
    fnv1a64: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sidecar {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    inputs: Vec<InputRef>,
}

impl Sidecar {
    pub fn new(command: &'static str, seed: u64, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = format!("{:016x}", fnv1a64(serde_json::to_string(&config)?.as_bytes()));
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash,
            config,
            inputs: Vec::new(),
        })
    }

    /// Records an input file with its content hash; unreadable files are recorded without one.
    pub fn input(mut self, path: &Path) -> Self {
        let hash = std::fs::read(path).map_or_else(|_| String::new(), |b| format!("{:016x}", fnv1a64(&b)));
        self.inputs.push(InputRef {
            path: path.display().to_string(),
            fnv1a64: hash,
        });
        self
    }

    /// `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write_for(&self, output: &Path) -> Result<()> {
        std::fs::write(Self::path_for(output), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
