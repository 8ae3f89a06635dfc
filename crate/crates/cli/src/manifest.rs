//! One JSON manifest per artifact-producing command.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tmepsr::model::ExperimentConfig;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    /// Unix seconds.
    pub started_at: f64,
    pub finished_at: f64,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// SHA-256 of a file, or of every file under a directory in sorted path order
/// (relative path and contents both feed the digest).
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let io = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).map_err(|e| io(&dir, e))? {
                let p = entry.map_err(|e| io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(std::fs::read(&f).map_err(|e| io(&f, e))?);
        }
    } else {
        hasher.update(std::fs::read(path).map_err(|e| io(path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Manifest {
    pub fn start(command: &str, config: Option<&ExperimentConfig>, seed: Option<u64>) -> Self {
        Manifest {
            command: command.to_string(),
            config: config.cloned(),
            config_hash: config.map(ExperimentConfig::hash),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: 0.0,
            extra: serde_json::Map::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = hash_path(path)?;
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn with_extra(mut self, key: &str, value: &impl Serialize) -> Self {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value).expect("value serializes"));
        self
    }

    /// Writes `out_dir/manifest.json`.
    pub fn finish(mut self, out_dir: &Path, outputs: &[PathBuf]) -> Result<(), CliError> {
        self.outputs = outputs.to_vec();
        self.finished_at = now();
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_manifest_and_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "2").unwrap();
        std::fs::write(dir.path().join("a.txt"), "1").unwrap();
        let before = hash_path(dir.path()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), before);
        std::fs::write(dir.path().join("a.txt"), "3").unwrap();
        assert_ne!(hash_path(dir.path()).unwrap(), before);
    }

    #[test]
    fn missing_file_is_data_error() {
        assert!(matches!(hash_path(Path::new("/no/such/file")), Err(CliError::Data(_))));
    }
}
