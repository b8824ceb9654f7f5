// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpointed activation measurement over (feature, probe) pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use probegraph_core::graph::NodeId;
use probegraph_core::io::RawActivation;

use crate::error::AcquisitionError;
use crate::ledger::{atomic_write, CheckpointLedger};
use crate::probes::ProbePrompt;
use crate::rate::{Clock, RateLimiter};
use crate::retry::{with_backoff, Attempt, Backoff, Sleeper};
use crate::service::{ActivationService, FeatureRef};

/// On-disk artifact for one (feature, probe) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationArtifact {
    pub feature_id: NodeId,
    pub layer: u32,
    pub probe_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

pub struct MeasureOptions<'a> {
    pub backoff: Backoff,
    pub sleeper: &'a dyn Sleeper,
    /// Applied to remote services only.
    pub limiter: Option<(&'a RateLimiter, &'a dyn Clock)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub scheduled: usize,
    pub fetched: usize,
    pub skipped: usize,
    /// Artifacts found on disk without a ledger entry and adopted.
    pub reconciled: usize,
    pub attempts: Vec<(String, String, Vec<Attempt>)>,
}

pub fn artifact_rel_path(feature: &NodeId, probe: &str) -> String {
    format!("{feature}/{probe}.json")
}

/// Every (feature, probe) task in measurement order: feature-major.
pub fn schedule<'a>(
    features: &'a [FeatureRef],
    probes: &'a [ProbePrompt],
) -> impl Iterator<Item = (&'a FeatureRef, &'a ProbePrompt)> {
    features.iter().flat_map(move |f| probes.iter().map(move |p| (f, p)))
}

fn artifact_valid(path: &Path, text: &str) -> bool {
    std::fs::read(path)
        .ok()
        .and_then(|b| serde_json::from_slice::<ActivationArtifact>(&b).ok())
        .is_some_and(|a| a.text == text && a.tokens.len() == a.values.len())
}

/// Fetch every pair not yet in the ledger. Each result is written atomically
/// before its ledger entry, so an interrupted run resumes without refetching.
pub fn measure_activations(
    features: &[FeatureRef],
    probes: &[ProbePrompt],
    service: &dyn ActivationService,
    ledger: &mut CheckpointLedger,
    artifacts_dir: &Path,
    opts: &MeasureOptions<'_>,
) -> Result<MeasureReport, AcquisitionError> {
    let mut report = MeasureReport::default();
    for (f, p) in schedule(features, probes) {
        report.scheduled += 1;
        let rel = artifact_rel_path(&f.id, &p.id);
        let path = artifacts_dir.join(&rel);
        let on_disk = artifact_valid(&path, &p.text);
        if ledger.contains(f.id.as_str(), &p.id) && on_disk {
            report.skipped += 1;
            continue;
        }
        if on_disk {
            ledger.record(f.id.as_str(), &p.id, &rel)?;
            report.reconciled += 1;
            continue;
        }
        if service.is_remote() {
            if let Some((limiter, clock)) = opts.limiter {
                let waited = limiter.acquire(clock);
                if !waited.is_zero() {
                    tracing::debug!(?waited, "rate limiter wait");
                }
            }
        }
        let (resp, attempts) = with_backoff(&opts.backoff, opts.sleeper, || service.fetch(f, p))?;
        tracing::debug!(feature = %f.id, probe = %p.id, attempts = attempts.len(), "measured");
        let artifact = ActivationArtifact {
            feature_id: f.id.clone(),
            layer: f.layer,
            probe_id: p.id.clone(),
            text: p.text.clone(),
            tokens: resp.tokens,
            values: resp.values,
        };
        let mut bytes = serde_json::to_vec(&artifact)?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        ledger.record(f.id.as_str(), &p.id, &rel)?;
        report.fetched += 1;
        report.attempts.push((f.id.to_string(), p.id.clone(), attempts));
    }
    Ok(report)
}

/// Read measured artifacts back in schedule order.
pub fn load_artifacts(
    features: &[FeatureRef],
    probes: &[ProbePrompt],
    artifacts_dir: &Path,
) -> Result<Vec<RawActivation>, AcquisitionError> {
    schedule(features, probes)
        .map(|(f, p)| {
            let path: PathBuf = artifacts_dir.join(artifact_rel_path(&f.id, &p.id));
            let bytes = std::fs::read(&path)?;
            let a: ActivationArtifact = serde_json::from_slice(&bytes)?;
            Ok(RawActivation {
                feature: a.feature_id,
                layer: a.layer,
                probe_id: a.probe_id,
                tokens: a.tokens,
                values: a.values,
            })
        })
        .collect()
}
