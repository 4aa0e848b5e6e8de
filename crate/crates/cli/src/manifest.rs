//! Run manifests: enough to replay a command and check its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use aqe_core::persist::{file_digest, write_atomic};
use aqe_core::report::to_sorted_json;

pub const TOOL: &str = "aqe";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub argv: Vec<String>,
    /// Resolved global seed, after any AQE_SEED override.
    pub seed: Option<u64>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// Path to sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub elapsed_seconds: f64,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `<path>.manifest.json`
pub fn manifest_path(primary_output: &Path) -> PathBuf {
    sidecar(primary_output, "manifest.json")
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let d = file_digest(p).with_context(|| format!("hashing {}", p.display()))?;
            Ok((p.display().to_string(), d))
        })
        .collect()
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, to_sorted_json(self)?.as_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_keeps_extension() {
        assert_eq!(sidecar(Path::new("out/m.ckpt"), "timing.json"), PathBuf::from("out/m.ckpt.timing.json"));
        assert_eq!(manifest_path(Path::new("r.json")), PathBuf::from("r.json.manifest.json"));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: "index".into(),
            argv: vec!["index".into(), "--corpus".into(), "c.jsonl".into()],
            seed: None,
            config: serde_json::json!({"k1": 1.2}),
            inputs: [("c.jsonl".to_string(), "ab".to_string())].into(),
            outputs: BTreeMap::new(),
            started_at: now_rfc3339(),
            finished_at: now_rfc3339(),
            elapsed_seconds: 0.5,
        };
        let p = dir.path().join("m.json");
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
    }
}
