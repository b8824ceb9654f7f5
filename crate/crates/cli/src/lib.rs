// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline orchestration for probe-prompted attribution-graph analysis and a
//! local HTTP facade over a run directory.

pub mod analysis;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod server;
