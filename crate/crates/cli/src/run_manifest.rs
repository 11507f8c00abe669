use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record of one command invocation, written into its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub single_thread: bool,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// sha256 of every file the command wrote, keyed by path relative to
    /// the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn start(command: &str, output_dir: &Path, single_thread: bool) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                config: serde_json::Value::Null,
                seed: None,
                single_thread,
                inputs: Vec::new(),
                output_dir: output_dir.to_path_buf(),
                artifacts: BTreeMap::new(),
                wall_time_s: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn config<C: Serialize>(&mut self, config: &C) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let rel = path.strip_prefix(&self.manifest.output_dir).unwrap_or(path);
        let key = rel.to_string_lossy().replace('\\', "/");
        self.manifest.artifacts.insert(key, hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        fs::create_dir_all(&self.manifest.output_dir)?;
        let path = self.manifest.output_dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
