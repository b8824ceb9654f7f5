// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exponential backoff with an injectable sleeper.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::AcquisitionError;
use crate::service::ServiceFault;

/// `base * 2^k`, capped, for up to `max_attempts` tries. No jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backoff {
    pub base_ms: u64,
    pub cap_ms: u64,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base_ms: 1_000, cap_ms: 60_000, max_attempts: 6 }
    }
}

impl Backoff {
    /// Delay before retry number `k` (0 = first retry).
    pub fn delay(&self, k: u32) -> Duration {
        let factor = 1u64.checked_shl(k).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_ms.saturating_mul(factor).min(self.cap_ms))
    }

    pub fn schedule(&self) -> Vec<Duration> {
        (0..self.max_attempts.saturating_sub(1)).map(|k| self.delay(k)).collect()
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested sleeps without waiting.
#[derive(Default)]
pub struct RecordingSleeper {
    pub slept: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.slept.lock().expect("poisoned").push(d);
    }
}

impl RecordingSleeper {
    pub fn take(&self) -> Vec<Duration> {
        std::mem::take(&mut *self.slept.lock().expect("poisoned"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub index: u32,
    pub outcome: String,
    /// Wait before the next attempt, if any.
    pub delay_ms: Option<u64>,
}

/// Run `op` until it succeeds, a non-retryable fault occurs, or attempts run out.
pub fn with_backoff<T>(
    backoff: &Backoff,
    sleeper: &dyn Sleeper,
    mut op: impl FnMut() -> Result<T, ServiceFault>,
) -> Result<(T, Vec<Attempt>), AcquisitionError> {
    let mut attempts = Vec::new();
    let max = backoff.max_attempts.max(1);
    for k in 0..max {
        match op() {
            Ok(v) => {
                attempts.push(Attempt { index: k, outcome: "ok".into(), delay_ms: None });
                return Ok((v, attempts));
            }
            Err(fault) => {
                let last = k + 1 == max;
                let retryable = fault.is_retryable();
                let delay = (!last && retryable).then(|| {
                    let base = backoff.delay(k);
                    match &fault {
                        ServiceFault::RateLimited { retry_after: Some(r) } => base.max(*r),
                        _ => base,
                    }
                });
                tracing::debug!(attempt = k, %fault, ?delay, "service call failed");
                attempts.push(Attempt {
                    index: k,
                    outcome: fault.to_string(),
                    delay_ms: delay.map(|d| d.as_millis() as u64),
                });
                match (retryable, delay) {
                    (true, Some(d)) => sleeper.sleep(d),
                    _ => return Err(fault.into_error(attempts)),
                }
            }
        }
    }
    unreachable!("loop returns on the last attempt")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_doubles_then_caps() {
        let b = Backoff { base_ms: 100, cap_ms: 500, max_attempts: 6 };
        let ms: Vec<u128> = b.schedule().iter().map(Duration::as_millis).collect();
        assert_eq!(ms, [100, 200, 400, 500, 500]);
        assert_eq!(b.delay(80), Duration::from_millis(500));
    }

    #[test]
    fn transient_then_success() {
        let b = Backoff { base_ms: 10, cap_ms: 1000, max_attempts: 4 };
        let s = RecordingSleeper::default();
        let mut calls = 0;
        let (v, log) = with_backoff(&b, &s, || {
            calls += 1;
            if calls == 1 {
                Err(ServiceFault::RateLimited { retry_after: None })
            } else {
                Ok(7)
            }
        })
        .unwrap();
        assert_eq!(v, 7);
        assert_eq!(log.len(), 2);
        assert_eq!(s.take(), vec![Duration::from_millis(10)]);
    }

    #[test]
    fn exhausted_rate_limit_surfaces() {
        let b = Backoff { base_ms: 1, cap_ms: 4, max_attempts: 3 };
        let s = RecordingSleeper::default();
        let err = with_backoff::<()>(&b, &s, || Err(ServiceFault::RateLimited { retry_after: None })).unwrap_err();
        match err {
            AcquisitionError::RateLimitExceeded { attempts } => assert_eq!(attempts.len(), 3),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(s.take(), vec![Duration::from_millis(1), Duration::from_millis(2)]);
    }

    #[test]
    fn fatal_is_not_retried() {
        let b = Backoff::default();
        let s = RecordingSleeper::default();
        let err = with_backoff::<()>(&b, &s, || Err(ServiceFault::Fatal("bad request".into()))).unwrap_err();
        assert!(matches!(err, AcquisitionError::Service { ref attempts, .. } if attempts.len() == 1));
        assert!(s.take().is_empty());
    }
}
