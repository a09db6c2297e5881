//! Run manifests: the provenance record every artifact points back to.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Started,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub dataset_id: String,
    pub n_levels: Vec<usize>,
    pub realizations: usize,
    pub seeds: BTreeMap<String, u64>,
    /// stage -> artifact path, relative to the run directory
    pub artifact_paths: BTreeMap<String, String>,
    /// The configuration that produced this run, verbatim.
    pub config: serde_json::Value,
    /// Append-only stage log.
    pub history: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(
        config_hash: impl Into<String>,
        dataset_id: impl Into<String>,
        n_levels: Vec<usize>,
        realizations: usize,
        config: serde_json::Value,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.into(),
            dataset_id: dataset_id.into(),
            n_levels,
            realizations,
            seeds: BTreeMap::new(),
            artifact_paths: BTreeMap::new(),
            config,
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, stage: &str, status: StageStatus, note: Option<String>) {
        self.history.push(StageRecord {
            stage: stage.to_string(),
            status,
            note,
        });
    }

    /// Register an artifact. Existing entries are never overwritten with a
    /// different path.
    pub fn add_artifact(&mut self, key: &str, rel_path: &str) -> Result<()> {
        match self.artifact_paths.get(key) {
            Some(existing) if existing != rel_path => Err(Error::invalid(format!(
                "artifact '{key}' already registered at {existing}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.artifact_paths
                    .insert(key.to_string(), rel_path.to_string());
                Ok(())
            }
        }
    }

    pub fn is_completed(&self, stage: &str) -> bool {
        self.history
            .iter()
            .rev()
            .find(|r| r.stage == stage)
            .is_some_and(|r| r.status == StageStatus::Completed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported manifest schema_version {} (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(
            "abc",
            "synthetic",
            vec![30, 50],
            10,
            serde_json::json!({"r": 10}),
        );
        m.seeds.insert("global".into(), 42);
        m.add_artifact("metrics", "metrics.csv").unwrap();
        m.record("train", StageStatus::Completed, None);
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = RunManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert!(back.is_completed("train"));
        assert!(!back.is_completed("fit"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
    }

    #[test]
    fn artifacts_are_append_only() {
        let mut m = RunManifest::new("abc", "synthetic", vec![30], 2, serde_json::Value::Null);
        m.add_artifact("metrics", "metrics.csv").unwrap();
        m.add_artifact("metrics", "metrics.csv").unwrap();
        assert!(m.add_artifact("metrics", "other.csv").is_err());
    }
}
