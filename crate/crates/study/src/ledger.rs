//! Append-only record of completed study steps, used to resume runs.
//!
//! `ledger.json`:
//!
//! ```json
//! {"schema_version": 1, "entries": [
//!   {"step": "source/A", "kind": "source", "inputs_hash": "…", "outputs": [{"path": "source/A/model.ckpt", "sha256": "…"}],
//!    "outputs_hash": "…", "seconds": 12.5, "seed": 0, "status": "ok", "error": null}
//! ]}
//! ```
//!
//! A step is skipped when its latest entry succeeded with the same inputs
//! hash and every listed output still has the recorded content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StudyError};

pub const LEDGER_SCHEMA_VERSION: u32 = 1;
pub const LEDGER_FILE: &str = "ledger.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| StudyError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a JSON value in its compact serialization.
pub fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(v).expect("json serializes").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: String,
    pub kind: String,
    pub inputs_hash: String,
    pub outputs: Vec<Artifact>,
    pub outputs_hash: String,
    pub seconds: f64,
    pub seed: u64,
    pub status: StepStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub schema_version: u32,
    pub entries: Vec<LedgerEntry>,
    #[serde(skip)]
    path: PathBuf,
}

impl RunLedger {
    /// Opens `dir/ledger.json`, or starts an empty ledger.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(RunLedger {
                schema_version: LEDGER_SCHEMA_VERSION,
                entries: Vec::new(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| StudyError::io(&path, e))?;
        let mut l: RunLedger = serde_json::from_str(&text).map_err(|e| StudyError::format(&path, e.to_string()))?;
        if l.schema_version != LEDGER_SCHEMA_VERSION {
            return Err(StudyError::format(&path, format!("unsupported ledger version {}", l.schema_version)));
        }
        l.path = path;
        Ok(l)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn latest(&self, step: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.step == step)
    }

    /// The latest successful entry for `step`, if it can stand in for a new
    /// run with `inputs_hash`.
    pub fn reusable(&self, step: &str, inputs_hash: &str, out_dir: &Path) -> Option<&LedgerEntry> {
        let e = self.latest(step)?;
        if e.status != StepStatus::Ok || e.inputs_hash != inputs_hash {
            return None;
        }
        let intact = e
            .outputs
            .iter()
            .all(|a| hash_file(&out_dir.join(&a.path)).is_ok_and(|h| h == a.sha256));
        intact.then_some(e)
    }

    /// Appends an entry and rewrites the file atomically.
    pub fn append(&mut self, entry: LedgerEntry) -> Result<()> {
        self.entries.push(entry);
        self.save()
    }

    fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;
        }
        let tmp = self.path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(self).expect("ledger serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| StudyError::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| StudyError::io(&self.path, e))
    }
}

/// Hashes the given output files.
pub fn artifacts(out_dir: &Path, rel: &[String]) -> Result<(Vec<Artifact>, String)> {
    let mut list = Vec::with_capacity(rel.len());
    let mut all = Sha256::new();
    for r in rel {
        let h = hash_file(&out_dir.join(r))?;
        all.update(r.as_bytes());
        all.update(h.as_bytes());
        list.push(Artifact {
            path: r.clone(),
            sha256: h,
        });
    }
    Ok((list, hex::encode(all.finalize())))
}
