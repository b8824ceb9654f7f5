// SPDX-License-Identifier: MIT OR Apache-2.0

//! The bundled fixtures must be what the generator writes today.

use std::path::PathBuf;

use probegraph_fixturegen::{simple, write_recorded, SEED};

#[test]
fn recorded_circuits_match_bundled_fixtures() {
    let bundled = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let out = tempfile::tempdir().unwrap();
    for rec in [simple::small(SEED ^ 7), simple::muscle(SEED ^ 11)] {
        write_recorded(out.path(), &rec).unwrap();
        for file in ["graph.json", "grouping.csv"] {
            let fresh = std::fs::read(out.path().join(rec.name).join(file)).unwrap();
            let kept = std::fs::read(bundled.join(rec.name).join(file)).unwrap();
            assert!(fresh == kept, "{}/{file} differs; rerun probegraph-fixturegen", rec.name);
        }
    }
}
