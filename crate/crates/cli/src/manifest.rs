use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mcfnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation, written to the output directory before any
/// work starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: Option<TrainConfig>,
    pub git_describe: String,
    pub version: String,
    pub timestamp: String,
    pub seed: Option<u64>,
    /// Parameter groups updated by the generator and discriminator steps;
    /// empty for commands that do not train.
    pub generator_groups: Vec<String>,
    pub discriminator_groups: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_path: None,
            config: None,
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            seed: None,
            generator_groups: Vec::new(),
            discriminator_groups: Vec::new(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
