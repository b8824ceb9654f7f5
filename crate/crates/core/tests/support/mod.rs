// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared by the integration tests here and the acceptance harness.

#![allow(dead_code)]

pub mod classifier_cases;
pub mod cluster;
pub mod oracle;
pub mod signature_checks;
