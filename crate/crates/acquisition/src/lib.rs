// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept and probe generation, activation measurement with rate limiting,
//! backoff and checkpoint/resume.

pub mod concepts;
pub mod error;
pub mod ledger;
pub mod measure;
pub mod mock;
pub mod probes;
pub mod rate;
pub mod retry;
pub mod service;

pub use error::AcquisitionError;
