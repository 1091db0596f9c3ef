use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use meaeq_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub finished_at: u64,
}

/// Index of the artifacts a work directory holds, rewritten after each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: Option<String>,
    pub created_at: u64,
    pub updated_at: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn load_or_new(work: &Path) -> Result<Self> {
        let path = work.join(FILE_NAME);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let t = now();
                Ok(RunManifest {
                    tool_version: env!("CARGO_PKG_VERSION").into(),
                    config_digest: None,
                    created_at: t,
                    updated_at: t,
                    stages: BTreeMap::new(),
                })
            }
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }

    /// Record a finished stage and write the manifest. Refuses to reference
    /// outputs that are not on disk.
    pub fn record(
        mut self,
        work: &Path,
        stage: &str,
        outputs: Vec<PathBuf>,
        seed: Option<u64>,
        digest: Option<u64>,
    ) -> Result<()> {
        if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
            return Err(Error::Inconsistent(format!(
                "stage output {} is missing",
                missing.display()
            )));
        }
        let t = now();
        if let Some(d) = digest {
            self.config_digest = Some(format!("{d:016x}"));
        }
        self.tool_version = env!("CARGO_PKG_VERSION").into();
        self.updated_at = t;
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                outputs,
                seed,
                finished_at: t,
            },
        );
        let path = work.join(FILE_NAME);
        let body = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, body + "\n").map_err(|e| Error::Io { path, source: e })
    }
}
