//! Replica decisions.
//!
//! Each poll combines GitHub demand, the keepalive deadline and the observed
//! Deployment scale into one [`Decision`], by priority:
//!
//! 1. GitHub poll failed: hold the last written (or observed) replica count.
//! 2. Matching jobs outstanding: `min(jobs, max_runners)`.
//! 3. A forced activation is still inside its dwell: keep one runner.
//! 4. The runner has been idle for too long: force one runner up.
//! 5. Otherwise scale to zero.
//!
//! The runner's GitHub credential only renews while a runner is connected,
//! so rules 3 and 4 keep it from expiring on quiet repositories.

mod manager;

use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::github::JobRecord;
use crate::kube::{PodInfo, PodPhase, ScaleSnapshot};
use crate::policy::{delta, Policy};

pub use manager::{
    JsonLinesSink, Manager, ManagerSettings, ReconcileError, ReconcileRecord, RecordSink, TickOutcome,
    KEEPALIVE_ANNOTATION, LAST_ACTIVE_ANNOTATION,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    /// Already label-filtered. Meaningless when `github_poll_ok` is false.
    pub outstanding_jobs: Vec<JobRecord>,
    pub scale: ScaleSnapshot,
    pub pods: Vec<PodInfo>,
    pub polled_at: DateTime<Utc>,
    pub github_poll_ok: bool,
}

impl Observation {
    pub fn has_running_runner(&self) -> bool {
        self.scale.status_replicas >= 1 && self.pods.iter().any(|p| p.phase == PodPhase::Running)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reason {
    Demand,
    Keepalive,
    Idle,
    Hold,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Demand => "demand",
            Reason::Keepalive => "keepalive",
            Reason::Idle => "idle",
            Reason::Hold => "hold",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub target_replicas: u32,
    pub reason: Reason,
}

impl Decision {
    pub fn new(target_replicas: u32, reason: Reason) -> Self {
        Self { target_replicas, reason }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerState {
    /// Last time a live runner was observed; mirrored to an annotation.
    pub last_active: Option<DateTime<Utc>>,
    /// Start of the forced activation in progress, if any.
    pub keepalive_started_at: Option<DateTime<Utc>>,
    pub last_written_replicas: Option<u32>,
}

/// True iff the runner was never seen alive or has been idle for at least
/// `force_interval`.
pub fn keepalive_due(last_active: Option<DateTime<Utc>>, now: DateTime<Utc>, force_interval: Duration) -> bool {
    match last_active {
        None => true,
        Some(at) => now - at >= delta(force_interval),
    }
}

pub fn compute_desired(
    observation: &Observation,
    state: &ManagerState,
    policy: &Policy,
    now: DateTime<Utc>,
) -> Decision {
    if !observation.github_poll_ok {
        let held = state.last_written_replicas.unwrap_or(observation.scale.spec_replicas).min(policy.max_runners);
        return Decision::new(held, Reason::Hold);
    }
    let demand = observation.outstanding_jobs.len();
    if demand > 0 {
        let target = u32::try_from(demand).unwrap_or(u32::MAX).min(policy.max_runners);
        return Decision::new(target, Reason::Demand);
    }
    if let Some(started) = state.keepalive_started_at {
        if now - started < delta(policy.min_dwell) {
            return Decision::new(1, Reason::Keepalive);
        }
    }
    if keepalive_due(state.last_active, now, policy.keepalive_idle_limit()) {
        return Decision::new(1, Reason::Keepalive);
    }
    Decision::new(0, Reason::Idle)
}

/// Folds one iteration's outcome into the bookkeeping. `written` is the
/// replica count actually written this iteration, if any.
pub fn update_state(
    state: &ManagerState,
    decision: &Decision,
    observation: &Observation,
    now: DateTime<Utc>,
    written: Option<u32>,
) -> ManagerState {
    let mut next = state.clone();
    if observation.has_running_runner() {
        next.last_active = Some(state.last_active.map_or(now, |prev| prev.max(now)));
    }
    match decision.reason {
        Reason::Keepalive => {
            next.keepalive_started_at.get_or_insert(now);
        }
        Reason::Demand | Reason::Idle => next.keepalive_started_at = None,
        Reason::Hold => {}
    }
    if written.is_some() {
        next.last_written_replicas = written;
    }
    next
}
