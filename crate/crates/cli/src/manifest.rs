//! Run manifests: what was run, with which resolved settings, and the
//! content hash of everything it wrote.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seeds: Value,
    /// Hashes of checkpoints read by the run.
    pub inputs: Vec<Artifact>,
    pub metrics: Value,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn artifact(path: &Path) -> Result<Artifact> {
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Collects a manifest while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config: Value::Null,
                seeds: Value::Null,
                inputs: Vec::new(),
                metrics: Value::Null,
                wall_clock_seconds: 0.0,
                artifacts: Vec::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, c: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(c)?;
        Ok(())
    }

    pub fn seeds(&mut self, s: Value) {
        self.manifest.seeds = s;
    }

    pub fn metrics(&mut self, m: Value) {
        self.manifest.metrics = m;
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(artifact(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.artifacts.push(artifact(path)?);
        Ok(())
    }

    /// Writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
