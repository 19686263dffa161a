use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;

/// Record of one command invocation; `config` alone reproduces the run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<&'static str, String>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &'static str, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config)?,
            artifacts: BTreeMap::new(),
            duration_seconds: 0.0,
        })
    }

    pub fn artifact(&mut self, key: &'static str, path: &Path) {
        self.artifacts.insert(key, path.display().to_string());
    }

    pub fn finish(mut self, elapsed: Duration, path: &Path) -> Result<()> {
        self.duration_seconds = elapsed.as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}
