//! Bounded exponential backoff for remote calls.

use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total tries, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 1000, max_delay_ms: 30_000, jitter: true }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, max_delay_ms: 0, jitter: false }
    }

    /// Delay before try `next` (2-based: the delay after the first failure
    /// precedes try 2).
    pub fn delay_before(&self, next: u32) -> Duration {
        let exp = next.saturating_sub(2).min(20);
        let raw = self.base_delay_ms.saturating_mul(1u64 << exp).min(self.max_delay_ms);
        let ms = if self.jitter && raw > 0 {
            let factor: f64 = rand::rng().random_range(0.5..=1.0);
            (raw as f64 * factor) as u64
        } else {
            raw
        };
        Duration::from_millis(ms)
    }
}

/// Errors that know whether another try might succeed.
pub trait Transient {
    fn is_transient(&self) -> bool;

    /// Server-requested wait, e.g. from a rate-limit response.
    fn retry_after(&self) -> Option<Duration> {
        None
    }
}

/// Run `op` until it succeeds, fails permanently, or the policy runs out.
/// `op` receives the 1-based try number.
pub fn with_retry<T, E: Transient>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, E>,
) -> Result<T, E> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < max => {
                let mut wait = policy.delay_before(attempt + 1);
                if let Some(after) = e.retry_after() {
                    wait = wait.max(after.min(Duration::from_millis(policy.max_delay_ms)));
                }
                tracing::debug!(attempt, ?wait, "transient failure, retrying");
                if !wait.is_zero() {
                    thread::sleep(wait);
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct E(bool);
    impl Transient for E {
        fn is_transient(&self) -> bool {
            self.0
        }
    }

    #[test]
    fn retries_transient_up_to_limit() {
        let mut calls = 0;
        let r: Result<(), E> = with_retry(&RetryPolicy::no_delay(3), |_| {
            calls += 1;
            Err(E(true))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);
    }

    #[test]
    fn permanent_is_not_retried() {
        let mut calls = 0;
        let r: Result<(), E> = with_retry(&RetryPolicy::no_delay(5), |_| {
            calls += 1;
            Err(E(false))
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn recovers_after_transient() {
        let r: Result<u32, E> =
            with_retry(&RetryPolicy::no_delay(3), |n| if n < 3 { Err(E(true)) } else { Ok(n) });
        assert_eq!(r.unwrap(), 3);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 10, base_delay_ms: 100, max_delay_ms: 350, jitter: false };
        assert_eq!(p.delay_before(2), Duration::from_millis(100));
        assert_eq!(p.delay_before(3), Duration::from_millis(200));
        assert_eq!(p.delay_before(4), Duration::from_millis(350));
    }
}
