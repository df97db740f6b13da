//! Per-command run manifests: what ran, on which inputs, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::AppResult;
use crate::format::{read_text, write_file};
use crate::store::sha256_file;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CODE_VERSION: &str = concat!("agedit ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: Option<String>,
    pub dataset_hash: Option<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    /// Digest of everything an evaluation depended on; reports carry the same value.
    pub inputs_hash: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputFile>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn begin(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config_digest: None,
            dataset_hash: None,
            code_version: CODE_VERSION.to_string(),
            seed: None,
            inputs_hash: None,
            started_unix: now_unix(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Checksum `files` (which must lie inside `out_dir`) and stamp the end time.
    pub fn finish(&mut self, out_dir: &Path, files: &[PathBuf]) -> AppResult<()> {
        for f in files {
            let rel = f.strip_prefix(out_dir).unwrap_or(f);
            self.outputs.push(OutputFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(f)?,
            });
        }
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.finished_unix = now_unix();
        Ok(())
    }

    /// Digest of everything except the timestamps; equal for identical
    /// reruns in deterministic mode.
    pub fn run_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update([0]);
        for s in [&self.config_digest, &self.dataset_hash, &self.inputs_hash] {
            h.update(s.as_deref().unwrap_or("").as_bytes());
            h.update([0]);
        }
        h.update(self.code_version.as_bytes());
        h.update(self.seed.map(|s| s.to_string()).unwrap_or_default().as_bytes());
        for o in &self.outputs {
            h.update([0]);
            h.update(o.path.as_bytes());
            h.update([0]);
            h.update(o.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, out_dir: &Path) -> AppResult<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        write_file(&path, serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| crate::error::AppError::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_hash_ignores_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, b"hello").unwrap();
        let mut a = RunManifest::begin("x");
        a.finish(dir.path(), &[f.clone()]).unwrap();
        let mut b = a.clone();
        b.started_unix += 10.0;
        b.finished_unix += 10.0;
        assert_eq!(a.run_hash(), b.run_hash());
        assert_eq!(a.outputs[0].path, "a.txt");
        b.outputs[0].sha256 = "0".into();
        assert_ne!(a.run_hash(), b.run_hash());
        let p = a.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), a);
    }
}
