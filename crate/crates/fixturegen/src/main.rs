// SPDX-License-Identifier: MIT OR Apache-2.0

//! Regenerate the bundled fixtures: `probegraph-fixturegen [OUT_DIR]`.

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixtures".to_owned());
    probegraph_fixturegen::write_all(std::path::Path::new(&out))
}
