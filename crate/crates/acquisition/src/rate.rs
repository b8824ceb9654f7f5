// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-bucket rate limiter over an injectable clock.

use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Roughly the public activation API budget.
pub const DEFAULT_CALLS_PER_HOUR: f64 = 100.0;

pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual time: sleeping advances the clock instantly.
#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("poisoned")
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().expect("poisoned") += d;
    }
}

pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Duration)>,
}

impl RateLimiter {
    /// `burst` calls may go out at once; the bucket refills at `per_hour`.
    pub fn new(per_hour: f64, burst: u32, clock: &dyn Clock) -> Self {
        let capacity = f64::from(burst.max(1));
        Self { capacity, per_second: per_hour / 3600.0, state: Mutex::new((capacity, clock.now())) }
    }

    /// Block (via the clock) until a call may proceed; returns the wait.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let mut state = self.state.lock().expect("poisoned");
        let now = clock.now();
        let (tokens, last) = *state;
        let mut tokens = (tokens + (now.saturating_sub(last)).as_secs_f64() * self.per_second).min(self.capacity);
        let mut waited = Duration::ZERO;
        if tokens < 1.0 {
            waited = Duration::from_secs_f64((1.0 - tokens) / self.per_second);
            clock.sleep(waited);
            tokens = 1.0;
        }
        *state = (tokens - 1.0, clock.now());
        waited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceiling_holds_over_virtual_hour() {
        let clock = ManualClock::default();
        let limiter = RateLimiter::new(100.0, 1, &clock);
        let mut calls = 0;
        while clock.now() < Duration::from_secs(3600) {
            limiter.acquire(&clock);
            calls += 1;
        }
        assert!((100..=101).contains(&calls), "{calls} calls in an hour");
    }

    #[test]
    fn burst_goes_out_without_waiting() {
        let clock = ManualClock::default();
        let limiter = RateLimiter::new(100.0, 3, &clock);
        for _ in 0..3 {
            assert_eq!(limiter.acquire(&clock), Duration::ZERO);
        }
        assert_eq!(limiter.acquire(&clock), Duration::from_secs(36));
    }
}
