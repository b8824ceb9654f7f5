// SPDX-License-Identifier: MIT OR Apache-2.0

//! Append-only checkpoint ledger (newline-delimited JSON) and atomic writes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::AcquisitionError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub run_id: String,
    pub feature_id: String,
    pub probe_id: String,
    /// Artifact path relative to the artifacts directory.
    pub artifact: String,
}

pub struct CheckpointLedger {
    path: PathBuf,
    run_id: String,
    completed: BTreeMap<(String, String), String>,
}

impl CheckpointLedger {
    /// Open or create the ledger. A torn final line left by an interrupted
    /// write is dropped.
    pub fn open(path: impl Into<PathBuf>, run_id: impl Into<String>) -> Result<Self, AcquisitionError> {
        let path = path.into();
        let mut completed = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut good_len = 0;
            for line in text.split_inclusive('\n') {
                if !line.ends_with('\n') {
                    break;
                }
                match serde_json::from_str::<LedgerEntry>(line.trim_end()) {
                    Ok(e) => {
                        completed.insert((e.feature_id, e.probe_id), e.artifact);
                        good_len += line.len();
                    }
                    Err(_) => break,
                }
            }
            if good_len < text.len() {
                tracing::warn!(path = %path.display(), "dropping torn ledger tail");
                OpenOptions::new().write(true).open(&path)?.set_len(good_len as u64)?;
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self { path, run_id: run_id.into(), completed })
    }

    pub fn contains(&self, feature: &str, probe: &str) -> bool {
        self.completed.contains_key(&(feature.to_owned(), probe.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.completed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completed.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Record a completed pair. Already-recorded pairs are left untouched.
    pub fn record(&mut self, feature: &str, probe: &str, artifact: &str) -> Result<(), AcquisitionError> {
        if self.contains(feature, probe) {
            return Ok(());
        }
        let entry = LedgerEntry {
            run_id: self.run_id.clone(),
            feature_id: feature.to_owned(),
            probe_id: probe.to_owned(),
            artifact: artifact.to_owned(),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.completed.insert((entry.feature_id, entry.probe_id), entry.artifact);
        Ok(())
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), AcquisitionError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.ndjson");
        {
            let mut l = CheckpointLedger::open(&p, "r").unwrap();
            l.record("f1", "p0", "f1/p0.json").unwrap();
            l.record("f1", "p0", "f1/p0.json").unwrap();
            l.record("f1", "p1", "f1/p1.json").unwrap();
        }
        let before = std::fs::read(&p).unwrap();
        assert_eq!(before.iter().filter(|&&b| b == b'\n').count(), 2);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"run_id\":\"r\",\"feat").unwrap();
        drop(f);
        let l = CheckpointLedger::open(&p, "r").unwrap();
        assert_eq!(l.len(), 2);
        assert!(l.contains("f1", "p1"));
        assert_eq!(std::fs::read(&p).unwrap(), before);
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
