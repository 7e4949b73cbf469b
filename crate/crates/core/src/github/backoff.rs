//! Retry pacing for GitHub requests.
//!
//! Delays grow 1 s, 2 s, 4 s, ... capped at 60 s, unless the server says how
//! long to wait. Retries never run past the caller's deadline (the end of the
//! current poll window); the remaining wait carries over to the next call.

use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Serialize;

use super::GithubError;
use crate::clock::Clock;
use crate::policy::delta;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackoffSchedule {
    pub base: Duration,
    pub factor: u32,
    pub cap: Duration,
}

impl Default for BackoffSchedule {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2, cap: Duration::from_secs(60) }
    }
}

impl BackoffSchedule {
    /// Delay after the `failures`-th consecutive failure (1-based).
    pub fn delay(&self, failures: u32) -> Duration {
        if failures == 0 {
            return Duration::ZERO;
        }
        let mut delay = self.base;
        for _ in 1..failures {
            delay = delay.saturating_mul(self.factor);
            if delay >= self.cap {
                return self.cap;
            }
        }
        delay.min(self.cap)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BackoffState {
    pub consecutive_failures: u32,
    pub next_allowed_attempt: Option<DateTime<Utc>>,
}

impl BackoffState {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Runs `attempt` until it succeeds, fails permanently, or the next permitted
/// attempt would fall at or after `deadline`.
///
/// Credential, not-found and protocol errors are returned immediately and do
/// not touch `state`. If no attempt could be made at all because an earlier
/// backoff is still pending past `deadline`, [`GithubError::BackingOff`] is
/// returned.
pub fn execute_with_backoff<T, F>(
    state: &mut BackoffState,
    schedule: &BackoffSchedule,
    clock: &dyn Clock,
    deadline: DateTime<Utc>,
    mut attempt: F,
) -> Result<T, GithubError>
where
    F: FnMut() -> Result<T, GithubError>,
{
    let mut last_error = None;
    loop {
        if let Some(next) = state.next_allowed_attempt {
            if next > clock.now() {
                if next >= deadline {
                    return Err(last_error.unwrap_or(GithubError::BackingOff { until: next }));
                }
                if !clock.sleep_until(next) {
                    return Err(GithubError::Interrupted);
                }
            }
        }
        match attempt() {
            Ok(value) => {
                state.reset();
                return Ok(value);
            }
            Err(err) if err.is_retryable() => {
                state.consecutive_failures += 1;
                let wait = err
                    .server_wait()
                    .map(|w| w.max(Duration::from_secs(1)))
                    .unwrap_or_else(|| schedule.delay(state.consecutive_failures));
                state.next_allowed_attempt = Some(clock.now() + delta(wait));
                tracing::debug!(
                    error = %err,
                    failures = state.consecutive_failures,
                    wait_secs = wait.as_secs(),
                    "GitHub request failed, backing off"
                );
                last_error = Some(err);
            }
            Err(err) => return Err(err),
        }
    }
}
