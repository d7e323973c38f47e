//! Run manifest: per-stage status, configuration snapshot, and input/output
//! file digests. Stages validate the digests of the files they read so a run
//! directory can never silently mix stages from different inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("digest mismatch for {file}: manifest records {expected}, found {actual}")]
    DigestMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("missing stage file {0}; run the prior stage first")]
    MissingInput(String),
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ManifestError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DigestMismatch { .. } => "DigestMismatch",
            Self::MissingInput(_) => "MissingInput",
            Self::Parse(_) => "Parse",
            Self::Io { .. } => "Io",
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub status: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn load_or_new(run_dir: &Path, run_id: &str) -> Result<Self, ManifestError> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| ManifestError::Parse(e.to_string()))
        } else {
            Ok(Self {
                run_id: run_id.to_string(),
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), ManifestError> {
        let path = run_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| ManifestError::Parse(e.to_string()))?;
        write_atomic(&path, json.as_bytes())
    }

    /// Digest recorded for a file by any completed stage, if one exists.
    pub fn recorded_digest(&self, file: &str) -> Option<&str> {
        self.stages
            .values()
            .flat_map(|s| s.inputs.iter().chain(s.outputs.iter()))
            .find(|(name, _)| name.as_str() == file)
            .map(|(_, digest)| digest.as_str())
    }

    /// Digests a required input file and verifies it against whatever the
    /// manifest already recorded for it.
    pub fn verify_input(&self, run_dir: &Path, file: &str) -> Result<String, ManifestError> {
        let path = run_dir.join(file);
        if !path.exists() {
            return Err(ManifestError::MissingInput(file.to_string()));
        }
        let actual = sha256_file(&path)?;
        if let Some(expected) = self.recorded_digest(file) {
            if expected != actual {
                return Err(ManifestError::DigestMismatch {
                    file: file.to_string(),
                    expected: expected.to_string(),
                    actual,
                });
            }
        }
        Ok(actual)
    }

    /// Records a completed stage, digesting its output files.
    pub fn record_stage(
        &mut self,
        run_dir: &Path,
        stage: &str,
        config: serde_json::Value,
        inputs: BTreeMap<String, String>,
        output_files: &[&str],
    ) -> Result<(), ManifestError> {
        let mut outputs = BTreeMap::new();
        for file in output_files {
            outputs.insert(file.to_string(), sha256_file(&run_dir.join(file))?);
        }
        self.stages.insert(
            stage.to_string(),
            StageEntry {
                status: "completed".to_string(),
                config,
                inputs,
                outputs,
            },
        );
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Write-then-rename so interrupted runs never leave partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Stable sub-seed for a named stage of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_digest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path();
        std::fs::write(run_dir.join("stage.jsonl"), b"{}\n").unwrap();

        let mut manifest = RunManifest::load_or_new(run_dir, "run-1").unwrap();
        let digest = manifest.verify_input(run_dir, "stage.jsonl").unwrap();
        manifest
            .record_stage(
                run_dir,
                "variate",
                serde_json::json!({"n": 5}),
                [("stage.jsonl".to_string(), digest)].into_iter().collect(),
                &[],
            )
            .unwrap();
        manifest.save(run_dir).unwrap();

        let reloaded = RunManifest::load_or_new(run_dir, "ignored").unwrap();
        assert_eq!(reloaded.run_id, "run-1");
        assert!(reloaded.verify_input(run_dir, "stage.jsonl").is_ok());

        // Tampering with the recorded file is detected.
        std::fs::write(run_dir.join("stage.jsonl"), b"{\"x\":1}\n").unwrap();
        let err = reloaded.verify_input(run_dir, "stage.jsonl").unwrap_err();
        assert!(matches!(err, ManifestError::DigestMismatch { .. }));

        let err = reloaded.verify_input(run_dir, "absent.jsonl").unwrap_err();
        assert!(matches!(err, ManifestError::MissingInput(_)));
    }

    #[test]
    fn derived_seeds_differ_by_label_and_are_stable() {
        assert_eq!(derive_seed(7, "variate"), derive_seed(7, "variate"));
        assert_ne!(derive_seed(7, "variate"), derive_seed(7, "supervisor"));
        assert_ne!(derive_seed(7, "variate"), derive_seed(8, "variate"));
    }
}
