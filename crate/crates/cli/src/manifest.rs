use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Written next to every stage's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub domain: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub stage_seed: u64,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("manifest.{stage}.json"))
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let p = manifest_path(out, &self.stage);
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn read(out: &Path, stage: &str) -> Result<Self> {
        let p = manifest_path(out, stage);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
