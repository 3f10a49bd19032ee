//! Run manifests: the resolved configuration, input/output hashes, and
//! per-stage timings of one command — enough to re-run it identically.

use crate::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    /// Deterministic artifacts only; reports carrying wall times stay out
    /// of the hash set.
    pub outputs: Vec<FileRecord>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        RunManifest {
            tool: "zmono".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        self.inputs.push(FileRecord {
            path: path.as_ref().to_path_buf(),
            sha256: sha256_file(path.as_ref())?,
        });
        Ok(())
    }

    pub fn add_input_dir(&mut self, dir: impl AsRef<Path>) -> anyhow::Result<()> {
        self.inputs.push(FileRecord {
            path: dir.as_ref().to_path_buf(),
            sha256: sha256_dir(dir.as_ref())?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        self.outputs.push(FileRecord {
            path: path.as_ref().to_path_buf(),
            sha256: sha256_file(path.as_ref())?,
        });
        Ok(())
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        self.timings_s.insert(stage.into(), seconds);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<RunManifest> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.as_ref().display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Records a directory input as the hash of its sorted (name, file-hash)
/// pairs.
pub fn sha256_dir(dir: &Path) -> anyhow::Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for n in names {
        hasher.update(n.as_bytes());
        hasher.update(sha256_file(&dir.join(&n))?.as_bytes());
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let data = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.bin");
        std::fs::write(&data, b"hello").unwrap();
        let mut m = RunManifest::new("fit", RunConfig::default());
        m.add_input(&data).unwrap();
        m.time("total", 1.5);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.command, "fit");
        assert_eq!(back.inputs.len(), 1);
        assert_eq!(
            back.inputs[0].sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
    }
}
