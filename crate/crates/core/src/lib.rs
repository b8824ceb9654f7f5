// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution-graph analysis: node selection, probe activation signatures,
//! supernode classification, graph scores and grouping evaluation.

pub mod baselines;
pub mod classifier;
pub mod coherence;
pub mod error;
pub mod graph;
pub mod io;
pub mod lexicon;
pub mod metrics;
pub mod selection;
pub mod signatures;
pub mod transfer;
