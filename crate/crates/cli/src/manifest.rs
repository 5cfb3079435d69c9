//! Experiment manifests: every command writes exactly one, recording the
//! configuration digest, input file digests, tool version, wall clock and
//! emitted artifact paths.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    pub input_digests: Vec<(String, String)>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let d = Sha256::digest(&bytes);
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn sha256_str(s: &str) -> String {
    let d = Sha256::digest(s.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ManifestBuilder {
    command: String,
    config_digest: String,
    inputs: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
    started: std::time::Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_json: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_digest: sha256_str(config_json),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        if let Ok(digest) = sha256_file(path) {
            self.inputs.push((path.display().to_string(), digest));
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Write `<out_dir>/<command>.manifest.json` and return its path.
    pub fn write(self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let manifest = Manifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: self.config_digest,
            input_digests: self.inputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            artifacts: self.artifacts.iter().map(|p| p.display().to_string()).collect(),
        };
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(path)
    }
}
