// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fault-injection scenarios for measurement. Each panics on failure.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use probegraph_acquisition::ledger::CheckpointLedger;
use probegraph_acquisition::measure::{load_artifacts, measure_activations, MeasureOptions};
use probegraph_acquisition::mock::{MockServer, ScriptedReply};
use probegraph_acquisition::probes::{seed_probe, ProbePrompt};
use probegraph_acquisition::rate::{Clock, ManualClock, RateLimiter};
use probegraph_acquisition::retry::{Backoff, RecordingSleeper};
use probegraph_acquisition::service::{
    ActivationResponse, ActivationService, FeatureRef, HttpService, HttpServiceConfig, ServiceFault,
};
use probegraph_acquisition::AcquisitionError;
use probegraph_core::graph::NodeId;

fn features(n: usize) -> Vec<FeatureRef> {
    (0..n)
        .map(|i| FeatureRef {
            id: NodeId::from(format!("{}_{}", i % 4, 100 + i)),
            layer: (i % 4) as u32,
            feature_index: 100 + i as u64,
        })
        .collect()
}

fn probes(n: usize) -> Vec<ProbePrompt> {
    let mut v = vec![seed_probe("The capital of Texas is")];
    v.extend((0..n).map(|i| ProbePrompt {
        id: format!("c0p{i}"),
        text: format!("probe number {i}"),
        concept: "x".into(),
        tokens: Vec::new(),
    }));
    v
}

/// Deterministic fake that counts calls and can die after a budget.
struct Counting {
    calls: AtomicUsize,
    die_after: Option<usize>,
}

impl Counting {
    fn new(die_after: Option<usize>) -> Self {
        Self { calls: AtomicUsize::new(0), die_after }
    }
}

impl ActivationService for Counting {
    fn fetch(&self, f: &FeatureRef, p: &ProbePrompt) -> Result<ActivationResponse, ServiceFault> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.die_after.is_some_and(|d| n >= d) {
            return Err(ServiceFault::Fatal("killed".into()));
        }
        let tokens: Vec<String> = p.text.split(' ').map(|s| format!(" {s}")).collect();
        let values = (0..tokens.len()).map(|j| (f.feature_index as f64 + j as f64 * 0.25) % 3.0).collect();
        Ok(ActivationResponse { tokens, values })
    }

    fn is_remote(&self) -> bool {
        false
    }
}

fn opts(sleeper: &RecordingSleeper) -> MeasureOptions<'_> {
    MeasureOptions { backoff: Backoff { base_ms: 10, cap_ms: 100, max_attempts: 4 }, sleeper, limiter: None }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn schedules_every_pair_and_second_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let (fs, ps) = (features(40), probes(4));
    let svc = Counting::new(None);
    let s = RecordingSleeper::default();
    let mut ledger = CheckpointLedger::open(dir.path().join("ledger.ndjson"), "r1").unwrap();
    let r = measure_activations(&fs, &ps, &svc, &mut ledger, &dir.path().join("art"), &opts(&s)).unwrap();
    assert_eq!((r.scheduled, r.fetched, r.skipped), (200, 200, 0));
    let before = tree_bytes(dir.path());

    let svc2 = Counting::new(None);
    let mut ledger = CheckpointLedger::open(dir.path().join("ledger.ndjson"), "r1").unwrap();
    let r = measure_activations(&fs, &ps, &svc2, &mut ledger, &dir.path().join("art"), &opts(&s)).unwrap();
    assert_eq!((r.fetched, r.skipped), (0, 200));
    assert_eq!(svc2.calls.load(Ordering::SeqCst), 0);
    assert_eq!(tree_bytes(dir.path()), before);
    assert_eq!(load_artifacts(&fs, &ps, &dir.path().join("art")).unwrap().len(), 200);
}

pub fn resume_after_kill_has_no_duplicate_fetches_and_identical_outputs() {
    let (fs, ps) = (features(7), probes(5));
    let total = fs.len() * ps.len();
    let s = RecordingSleeper::default();

    let clean = tempfile::tempdir().unwrap();
    let mut l = CheckpointLedger::open(clean.path().join("ledger.ndjson"), "r").unwrap();
    measure_activations(&fs, &ps, &Counting::new(None), &mut l, &clean.path().join("art"), &opts(&s)).unwrap();

    for kill_at in [0, 1, 13, total - 1] {
        let dir = tempfile::tempdir().unwrap();
        let first = Counting::new(Some(kill_at));
        let mut l = CheckpointLedger::open(dir.path().join("ledger.ndjson"), "r").unwrap();
        let err = measure_activations(&fs, &ps, &first, &mut l, &dir.path().join("art"), &opts(&s));
        assert!(matches!(err, Err(AcquisitionError::Service { .. })));
        drop(l);

        let second = Counting::new(None);
        let mut l = CheckpointLedger::open(dir.path().join("ledger.ndjson"), "r").unwrap();
        let r = measure_activations(&fs, &ps, &second, &mut l, &dir.path().join("art"), &opts(&s)).unwrap();
        assert_eq!(r.skipped, kill_at);
        assert_eq!(r.fetched, total - kill_at);
        // One failing call on the first run; every pair fetched successfully exactly once.
        assert_eq!(first.calls.load(Ordering::SeqCst) - 1 + second.calls.load(Ordering::SeqCst), total);
        assert_eq!(tree_bytes(dir.path()), tree_bytes(clean.path()), "kill at {kill_at}");
    }
}

pub fn artifact_without_ledger_entry_is_adopted_not_refetched() {
    let dir = tempfile::tempdir().unwrap();
    let (fs, ps) = (features(2), probes(1));
    let s = RecordingSleeper::default();
    let ledger_path = dir.path().join("ledger.ndjson");
    let mut l = CheckpointLedger::open(&ledger_path, "r").unwrap();
    measure_activations(&fs, &ps, &Counting::new(None), &mut l, &dir.path().join("art"), &opts(&s)).unwrap();
    let full = std::fs::read_to_string(&ledger_path).unwrap();
    // Kill between artifact rename and ledger append, with a torn line.
    let kept: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(&ledger_path, format!("{kept}{{\"run_id\":\"r\",\"fea")).unwrap();

    let svc = Counting::new(None);
    let mut l = CheckpointLedger::open(&ledger_path, "r").unwrap();
    let r = measure_activations(&fs, &ps, &svc, &mut l, &dir.path().join("art"), &opts(&s)).unwrap();
    assert_eq!((r.skipped, r.reconciled, r.fetched), (2, 2, 0));
    assert_eq!(svc.calls.load(Ordering::SeqCst), 0);
    assert_eq!(std::fs::read_to_string(&ledger_path).unwrap(), full);
}

fn ok_body() -> String {
    r#"{"tokens":["<bos>"," probe"],"values":[0.0,1.5]}"#.into()
}

pub fn http_429_then_success_backs_off_and_records_attempts() {
    let server = MockServer::scripted(vec![
        ScriptedReply::rate_limited(None),
        ScriptedReply::rate_limited(Some(3)),
        ScriptedReply::status(503),
        ScriptedReply::ok(ok_body()),
    ])
    .unwrap();
    let cfg = HttpServiceConfig { base_url: server.base_url().into(), ..Default::default() };
    let svc = HttpService::new(cfg, Some("secret".into())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = RecordingSleeper::default();
    let o = MeasureOptions {
        backoff: Backoff { base_ms: 1000, cap_ms: 60_000, max_attempts: 6 },
        sleeper: &s,
        limiter: None,
    };
    let fs = vec![FeatureRef { id: NodeId::from("20_74108"), layer: 20, feature_index: 74108 }];
    let ps = vec![ProbePrompt {
        id: "c0p0".into(),
        text: "capital: probe".into(),
        concept: "capital".into(),
        tokens: vec![],
    }];
    let mut l = CheckpointLedger::open(dir.path().join("l.ndjson"), "r").unwrap();
    let r = measure_activations(&fs, &ps, &svc, &mut l, &dir.path().join("art"), &o).unwrap();
    assert_eq!(r.fetched, 1);
    // 1s, then max(2s, Retry-After 3s), then 4s.
    assert_eq!(s.take(), vec![Duration::from_secs(1), Duration::from_secs(3), Duration::from_secs(4)]);
    let attempts = &r.attempts[0].2;
    assert_eq!(attempts.len(), 4);
    assert_eq!(attempts[3].delay_ms, None);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 4);
    assert_eq!(reqs[0].method, "POST");
    assert_eq!(reqs[0].path, "/api/activation/new");
    assert_eq!(reqs[0].header("x-api-key"), Some("secret"));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["feature"]["source"], "20-clt-hp");
    assert_eq!(body["feature"]["index"], "74108");
    assert_eq!(body["feature"]["modelId"], "gemma-2-2b");
    assert_eq!(body["customText"], "capital: probe");
}

pub fn persistent_429_surfaces_rate_limit_exceeded_after_cap() {
    let server = MockServer::scripted(vec![ScriptedReply::rate_limited(None)]).unwrap();
    let cfg = HttpServiceConfig { base_url: server.base_url().into(), ..Default::default() };
    let svc = HttpService::new(cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = RecordingSleeper::default();
    let o =
        MeasureOptions { backoff: Backoff { base_ms: 100, cap_ms: 500, max_attempts: 6 }, sleeper: &s, limiter: None };
    let mut l = CheckpointLedger::open(dir.path().join("l.ndjson"), "r").unwrap();
    let err = measure_activations(&features(1), &probes(0), &svc, &mut l, &dir.path().join("art"), &o).unwrap_err();
    match err {
        AcquisitionError::RateLimitExceeded { attempts } => assert_eq!(attempts.len(), 6),
        other => panic!("unexpected {other:?}"),
    }
    let ms: Vec<u128> = s.take().iter().map(|d| d.as_millis()).collect();
    assert_eq!(ms, [100, 200, 400, 500, 500]);
    assert_eq!(server.requests().len(), 6);
    assert!(l.is_empty());
}

pub fn auth_failure_is_not_retried() {
    let server = MockServer::scripted(vec![ScriptedReply::status(401)]).unwrap();
    let cfg = HttpServiceConfig { base_url: server.base_url().into(), ..Default::default() };
    let svc = HttpService::new(cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = RecordingSleeper::default();
    let mut l = CheckpointLedger::open(dir.path().join("l.ndjson"), "r").unwrap();
    let err =
        measure_activations(&features(1), &probes(0), &svc, &mut l, &dir.path().join("art"), &opts(&s)).unwrap_err();
    assert!(matches!(err, AcquisitionError::Auth(_)));
    assert_eq!(server.requests().len(), 1);
}

pub fn remote_calls_respect_the_hourly_ceiling() {
    let server = MockServer::scripted(vec![ScriptedReply::ok(ok_body())]).unwrap();
    let cfg = HttpServiceConfig { base_url: server.base_url().into(), ..Default::default() };
    let svc = HttpService::new(cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = RecordingSleeper::default();
    let clock = ManualClock::default();
    let limiter = RateLimiter::new(100.0, 1, &clock);
    let o = MeasureOptions { backoff: Backoff::default(), sleeper: &s, limiter: Some((&limiter, &clock)) };
    let mut l = CheckpointLedger::open(dir.path().join("l.ndjson"), "r").unwrap();
    let r = measure_activations(&features(11), &probes(0), &svc, &mut l, &dir.path().join("art"), &o).unwrap();
    assert_eq!(r.fetched, 11);
    // First call immediate, ten more at 36 s spacing.
    let elapsed = clock.now().as_secs_f64();
    assert!((elapsed - 360.0).abs() < 1e-6, "{elapsed}");
}

pub fn timeouts_are_retried_on_the_same_schedule() {
    let server = MockServer::scripted(vec![
        ScriptedReply::stalled(400, ok_body()),
        ScriptedReply::status(408),
        ScriptedReply::ok(ok_body()),
    ])
    .unwrap();
    let cfg = HttpServiceConfig { base_url: server.base_url().into(), timeout_ms: 100, ..Default::default() };
    let svc = HttpService::new(cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = RecordingSleeper::default();
    let o = MeasureOptions {
        backoff: Backoff { base_ms: 250, cap_ms: 60_000, max_attempts: 4 },
        sleeper: &s,
        limiter: None,
    };
    let mut l = CheckpointLedger::open(dir.path().join("l.ndjson"), "r").unwrap();
    let r = measure_activations(&features(1), &probes(0), &svc, &mut l, &dir.path().join("art"), &o).unwrap();
    assert_eq!(r.fetched, 1);
    assert_eq!(s.take(), vec![Duration::from_millis(250), Duration::from_millis(500)]);
    let outcomes: Vec<&str> = r.attempts[0].2.iter().map(|a| a.outcome.as_str()).collect();
    assert_eq!(outcomes.len(), 3);
    assert!(outcomes[0].contains("timeout") && outcomes[1].contains("timeout"), "{outcomes:?}");
    assert_eq!(l.len(), 1);
}
