// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use probegraph_cli::config::LoadedConfig;
use probegraph_cli::pipeline::Pipeline;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn open(circuit: &str, out: &Path) -> Pipeline {
    let cfg = LoadedConfig::load(&fixture(circuit).join("run.yaml")).expect("fixture config");
    Pipeline::open(cfg, out).expect("run directory")
}

/// sha256 of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under dir").display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).expect("readable"))));
            }
        }
    }
    out
}
