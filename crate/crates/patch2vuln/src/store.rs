//! On-disk run store: `runs/<run_id>/<pair_id>/<stage>/` artifact directories
//! plus a per-pair manifest that records input/config digests for each
//! completed stage. Resumption is a digest comparison, never a timestamp one.
//!
//! All writes are write-then-rename so a crash mid-write leaves either the
//! old artifact or none, never a torn file.

use crate::digest::sha256_hex;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Pipeline stages in execution order. A stage may run only when every
/// predecessor has a completed manifest record.
pub const STAGE_ORDER: [&str; 10] = [
    "extract",
    "inspect",
    "diff",
    "rank",
    "dossier",
    "audit_preliminary",
    "audit_plan",
    "validate",
    "audit_final",
    "score",
];

pub fn stage_index(stage: &str) -> Option<usize> {
    STAGE_ORDER.iter().position(|&s| s == stage)
}

/// Stages that must be complete before `stage` can run.
pub fn predecessors(stage: &str) -> &'static [&'static str] {
    match stage_index(stage) {
        Some(i) => &STAGE_ORDER[..i],
        None => &[],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    /// Digest over the stage's upstream inputs.
    pub input_digest: String,
    /// Digest of the run configuration in force.
    pub config_digest: String,
    /// Digest over the stage's serialized primary artifact.
    pub output_digest: String,
    /// True when this record was satisfied from a previous run.
    pub cached: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub pair_id: String,
    pub records: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: &str, pair_id: &str) -> Self {
        RunManifest { run_id: run_id.to_string(), pair_id: pair_id.to_string(), records: Vec::new() }
    }

    pub fn record(&self, stage: &str) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.stage == stage)
    }

    /// Insert or replace the record for a stage, keeping stage order.
    pub fn upsert(&mut self, record: StageRecord) {
        self.records.retain(|r| r.stage != record.stage);
        self.records.push(record);
        self.records.sort_by_key(|r| stage_index(&r.stage).unwrap_or(usize::MAX));
    }

    /// A stage's prior result is reusable when it completed with the same
    /// input and config digests.
    pub fn cache_hit(&self, stage: &str, input_digest: &str, config_digest: &str) -> bool {
        self.record(stage).is_some_and(|r| {
            r.status == StageStatus::Completed
                && r.input_digest == input_digest
                && r.config_digest == config_digest
        })
    }

    /// Drop records for `stage` and everything after it.
    pub fn invalidate_from(&mut self, stage: &str) {
        if let Some(i) = stage_index(stage) {
            self.records.retain(|r| stage_index(&r.stage).map_or(false, |j| j < i));
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown stage: {0}")]
    UnknownStage(String),
    #[error("stage {stage} requires completed predecessor {missing}")]
    MissingPredecessor { stage: String, missing: String },
    #[error("artifact not found: {0}")]
    ArtifactMissing(PathBuf),
    #[error("bad artifact {0}: {1}")]
    BadArtifact(PathBuf, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone)]
pub struct RunStore {
    pub root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn pair_dir(&self, run_id: &str, pair_id: &str) -> PathBuf {
        self.root.join(run_id).join(pair_id)
    }

    pub fn stage_dir(&self, run_id: &str, pair_id: &str, stage: &str) -> PathBuf {
        self.pair_dir(run_id, pair_id).join(stage)
    }

    fn manifest_path(&self, run_id: &str, pair_id: &str) -> PathBuf {
        self.pair_dir(run_id, pair_id).join("manifest.json")
    }

    pub fn load_manifest(&self, run_id: &str, pair_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path(run_id, pair_id);
        if !path.is_file() {
            return Ok(RunManifest::new(run_id, pair_id));
        }
        let data = fs::read(&path)?;
        serde_json::from_slice(&data).map_err(|e| StoreError::BadArtifact(path, e.to_string()))
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.manifest_path(&manifest.run_id, &manifest.pair_id);
        let data = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        write_atomic(&path, &data)?;
        Ok(())
    }

    /// Fail unless every predecessor stage has completed.
    pub fn check_predecessors(&self, manifest: &RunManifest, stage: &str) -> Result<(), StoreError> {
        if stage_index(stage).is_none() {
            return Err(StoreError::UnknownStage(stage.to_string()));
        }
        for pred in predecessors(stage) {
            let ok = manifest.record(pred).is_some_and(|r| r.status == StageStatus::Completed);
            if !ok {
                return Err(StoreError::MissingPredecessor {
                    stage: stage.to_string(),
                    missing: pred.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Serialize a stage artifact as JSON and return its digest.
    pub fn write_artifact<T: Serialize>(
        &self,
        run_id: &str,
        pair_id: &str,
        stage: &str,
        name: &str,
        value: &T,
    ) -> Result<String, StoreError> {
        let data = serde_json::to_vec_pretty(value)
            .map_err(|e| StoreError::BadArtifact(PathBuf::from(name), e.to_string()))?;
        let path = self.stage_dir(run_id, pair_id, stage).join(name);
        write_atomic(&path, &data)?;
        Ok(sha256_hex(&data))
    }

    pub fn write_text(
        &self,
        run_id: &str,
        pair_id: &str,
        stage: &str,
        name: &str,
        text: &str,
    ) -> Result<String, StoreError> {
        let path = self.stage_dir(run_id, pair_id, stage).join(name);
        write_atomic(&path, text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn read_artifact<T: DeserializeOwned>(
        &self,
        run_id: &str,
        pair_id: &str,
        stage: &str,
        name: &str,
    ) -> Result<T, StoreError> {
        let path = self.stage_dir(run_id, pair_id, stage).join(name);
        if !path.is_file() {
            return Err(StoreError::ArtifactMissing(path));
        }
        let data = fs::read(&path)?;
        serde_json::from_slice(&data).map_err(|e| StoreError::BadArtifact(path, e.to_string()))
    }

    pub fn read_text(
        &self,
        run_id: &str,
        pair_id: &str,
        stage: &str,
        name: &str,
    ) -> Result<String, StoreError> {
        let path = self.stage_dir(run_id, pair_id, stage).join(name);
        if !path.is_file() {
            return Err(StoreError::ArtifactMissing(path));
        }
        Ok(fs::read_to_string(path)?)
    }
}
