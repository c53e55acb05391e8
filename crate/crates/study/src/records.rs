//! Append-only JSON-lines store of score records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, StudyError};
use crate::evaluation::ScoreRecord;

#[derive(Debug, Clone)]
pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RecordStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record as a single line, written with one call.
    pub fn append(&self, r: &ScoreRecord) -> Result<()> {
        r.validate()?;
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;
        }
        let mut line = serde_json::to_string(r).expect("record serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| StudyError::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| StudyError::io(&self.path, e))
    }

    pub fn append_all<'a>(&self, rs: impl IntoIterator<Item = &'a ScoreRecord>) -> Result<()> {
        for r in rs {
            self.append(r)?;
        }
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<ScoreRecord>> {
        read_records(&self.path)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreRecord =
            serde_json::from_str(line).map_err(|e| StudyError::format(path, format!("line {}: {e}", i + 1)))?;
        r.validate().map_err(|e| StudyError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Method;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path().join("r.jsonl"));
        let r = ScoreRecord {
            source_domain: "A".into(),
            target_domain: "A".into(),
            method: Method::Oracle,
            availability: None,
            case_id: "A_000".into(),
            surface_dice: 0.9,
            dice: 0.95,
            seed: 1,
        };
        store.append(&r).unwrap();
        store.append(&r).unwrap();
        assert_eq!(store.read_all().unwrap(), vec![r.clone(), r]);
        let missing = RecordStore::new(dir.path().join("nope.jsonl"));
        let e = missing.read_all().unwrap_err();
        assert!(e.to_string().contains("nope.jsonl"));
    }
}
