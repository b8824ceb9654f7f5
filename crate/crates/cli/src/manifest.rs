// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifest: input digests and per-stage completion records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Digest of any serializable value through its JSON form.
pub fn digest_value<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    /// Digest of the configuration the stage ran with.
    pub params: String,
    /// Artifact name to digest, as consumed.
    pub inputs: BTreeMap<String, String>,
    /// Artifact name to digest, as produced.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    /// Config and auxiliary file digests.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self { run_id: run_id.into(), tool_version: TOOL_VERSION.to_owned(), ..Default::default() }
    }

    pub fn load(dir: &Path) -> Option<Self> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("serializable");
        v.push(b'\n');
        v
    }
}
