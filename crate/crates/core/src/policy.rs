//! Provisioning knobs and their bounds.

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use crate::labels::LabelSet;

/// GitHub's runner credential lifetime. Two forced provisionings must fit in
/// one lifetime.
pub const TOKEN_LIFETIME: Duration = Duration::from_secs(7 * 24 * 3600);

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(60);
pub const DEFAULT_FORCE_INTERVAL: Duration = Duration::from_secs(84 * 3600);
pub const DEFAULT_MIN_DWELL: Duration = Duration::from_secs(15 * 60);
pub const DEFAULT_MAX_RUNNERS: u32 = 1;
pub const DEFAULT_RUNNER_LABELS: &[&str] = &["self-hosted", "linux", "x64", "linux-gpu-cuda"];
pub const DEFAULT_OUTSTANDING_STATUSES: &[&str] = &["queued", "in_progress"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    pub poll_interval: Duration,
    /// Longest allowed spacing between the starts of two runner activations
    /// when there is no demand.
    pub force_interval: Duration,
    /// How long a forced runner is kept up so it can refresh its credential.
    pub min_dwell: Duration,
    pub max_runners: u32,
    pub runner_labels: LabelSet,
    pub outstanding_statuses: BTreeSet<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("policy bound violated: {0}")]
pub struct PolicyError(pub String);

impl Default for Policy {
    fn default() -> Self {
        Self {
            poll_interval: DEFAULT_POLL_INTERVAL,
            force_interval: DEFAULT_FORCE_INTERVAL,
            min_dwell: DEFAULT_MIN_DWELL,
            max_runners: DEFAULT_MAX_RUNNERS,
            runner_labels: LabelSet::new(DEFAULT_RUNNER_LABELS),
            outstanding_statuses: DEFAULT_OUTSTANDING_STATUSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Policy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let fmt = |d: Duration| humantime::format_duration(d).to_string();
        if self.poll_interval.is_zero() {
            return Err(PolicyError("poll_interval must be > 0".into()));
        }
        if self.min_dwell < self.poll_interval {
            return Err(PolicyError(format!(
                "min_dwell ({}) must be >= poll_interval ({})",
                fmt(self.min_dwell),
                fmt(self.poll_interval)
            )));
        }
        if self.force_interval <= self.min_dwell {
            return Err(PolicyError(format!(
                "force_interval ({}) must be > min_dwell ({})",
                fmt(self.force_interval),
                fmt(self.min_dwell)
            )));
        }
        if self.force_interval * 2 > TOKEN_LIFETIME {
            return Err(PolicyError(format!(
                "2 x force_interval ({}) must be <= 7 days ({})",
                fmt(self.force_interval * 2),
                fmt(TOKEN_LIFETIME)
            )));
        }
        if self.max_runners < 1 {
            return Err(PolicyError("max_runners must be >= 1".into()));
        }
        if self.outstanding_statuses.is_empty() {
            return Err(PolicyError("outstanding_statuses must not be empty".into()));
        }
        Ok(())
    }

    /// Maximum runner idle time before a forced activation starts. The
    /// activation itself lasts `min_dwell`, so measuring idleness from the
    /// end of the previous activation keeps start-to-start spacing at
    /// `force_interval`.
    pub fn keepalive_idle_limit(&self) -> Duration {
        self.force_interval.saturating_sub(self.min_dwell)
    }
}

/// Converts a std duration for timestamp arithmetic.
pub fn delta(d: Duration) -> chrono::TimeDelta {
    chrono::TimeDelta::from_std(d).unwrap_or(chrono::TimeDelta::MAX)
}
