use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use super::{compute_desired, update_state, Decision, ManagerState, Observation, Reason};
use crate::clock::{parse_rfc3339, rfc3339, Clock, Shutdown};
use crate::github::{GithubClient, GithubError, JobRecord};
use crate::kube::{KubeClient, KubeError};
use crate::policy::{delta, Policy};
use crate::repo::RepoCoordinates;

/// Deployment annotation holding the last time a runner was seen alive.
pub const LAST_ACTIVE_ANNOTATION: &str = "runner-manager/last-active";
/// Deployment annotation holding the start of an in-progress forced
/// activation, so a restarted manager honours the remaining dwell.
pub const KEEPALIVE_ANNOTATION: &str = "runner-manager/keepalive-started";

#[derive(Clone, Debug)]
pub struct ManagerSettings {
    pub repo: RepoCoordinates,
    pub deployment: String,
    pub pod_selector: String,
    pub policy: Policy,
}

/// One line of the structured decision log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReconcileRecord {
    pub time: DateTime<Utc>,
    pub tick: DateTime<Utc>,
    pub queued: Option<usize>,
    pub in_progress: Option<usize>,
    pub observed: Option<u32>,
    pub desired: Option<u32>,
    pub reason: Option<Reason>,
    pub wrote_scale: bool,
    pub github_ok: bool,
    pub last_active: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReconcileRecord {
    pub fn decision(&self) -> Option<Decision> {
        Some(Decision::new(self.desired?, self.reason?))
    }
}

pub trait RecordSink: Send {
    fn record(&mut self, record: &ReconcileRecord);
}

impl<F: FnMut(&ReconcileRecord) + Send> RecordSink for F {
    fn record(&mut self, record: &ReconcileRecord) {
        self(record)
    }
}

/// Writes each record as one JSON object per line.
pub struct JsonLinesSink<W: Write + Send>(pub W);

impl JsonLinesSink<std::io::Stdout> {
    pub fn stdout() -> Self {
        Self(std::io::stdout())
    }
}

impl<W: Write + Send> RecordSink for JsonLinesSink<W> {
    fn record(&mut self, record: &ReconcileRecord) {
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(self.0, "{line}");
            let _ = self.0.flush();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TickOutcome {
    Completed(ReconcileRecord),
    /// Shutdown arrived mid-iteration; nothing was written.
    Abandoned,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconcileError {
    #[error(transparent)]
    GithubCredential(GithubError),
    #[error(transparent)]
    KubeCredential(KubeError),
    #[error(transparent)]
    Fatal(KubeError),
}

impl ReconcileError {
    pub fn is_credential(&self) -> bool {
        !matches!(self, ReconcileError::Fatal(_))
    }
}

#[derive(Default)]
struct Persisted {
    hydrated: bool,
    annotations: BTreeMap<&'static str, Option<String>>,
}

pub struct Manager {
    github: GithubClient,
    kube: KubeClient,
    settings: ManagerSettings,
    clock: Arc<dyn Clock>,
    shutdown: Shutdown,
    state: ManagerState,
    persisted: Persisted,
    sink: Box<dyn RecordSink>,
    last_record: Option<ReconcileRecord>,
    consecutive_github_errors: u32,
    consecutive_kube_errors: u32,
}

impl Manager {
    pub fn new(
        github: GithubClient,
        kube: KubeClient,
        settings: ManagerSettings,
        clock: Arc<dyn Clock>,
        shutdown: Shutdown,
        sink: Box<dyn RecordSink>,
    ) -> Self {
        Self {
            github,
            kube,
            settings,
            clock,
            shutdown,
            state: ManagerState::default(),
            persisted: Persisted::default(),
            sink,
            last_record: None,
            consecutive_github_errors: 0,
            consecutive_kube_errors: 0,
        }
    }

    pub fn state(&self) -> &ManagerState {
        &self.state
    }

    pub fn settings(&self) -> &ManagerSettings {
        &self.settings
    }

    pub fn namespace(&self) -> &str {
        self.kube.namespace()
    }

    pub fn last_record(&self) -> Option<&ReconcileRecord> {
        self.last_record.as_ref()
    }

    pub fn consecutive_github_errors(&self) -> u32 {
        self.consecutive_github_errors
    }

    pub fn consecutive_kube_errors(&self) -> u32 {
        self.consecutive_kube_errors
    }

    pub fn github_backoff_until(&self) -> Option<DateTime<Utc>> {
        self.github.backoff().next_allowed_attempt
    }

    /// One poll: read demand and cluster state, decide, write if needed.
    /// `tick` is the scheduled start of this iteration; GitHub retries are
    /// confined to `[tick, tick + poll_interval)`.
    pub fn reconcile_once(&mut self, tick: DateTime<Utc>) -> Result<TickOutcome, ReconcileError> {
        let policy = self.settings.policy.clone();
        let deadline = tick + delta(policy.poll_interval);

        let poll = self.github.list_outstanding_jobs(
            &self.settings.repo,
            &policy.outstanding_statuses,
            &policy.runner_labels,
            deadline,
        );
        let (jobs, github_error) = match poll {
            Ok(jobs) => {
                self.consecutive_github_errors = 0;
                (Some(jobs), None)
            }
            Err(GithubError::Interrupted) => return Ok(TickOutcome::Abandoned),
            Err(e) if e.is_credential() => {
                self.consecutive_github_errors += 1;
                return Err(ReconcileError::GithubCredential(e));
            }
            Err(e) => {
                self.consecutive_github_errors += 1;
                tracing::warn!(error = %e, "GitHub poll failed, holding replicas");
                (None, Some(e.to_string()))
            }
        };
        if self.shutdown.is_requested() {
            return Ok(TickOutcome::Abandoned);
        }

        let (queued, in_progress) = match &jobs {
            Some(jobs) => (Some(count(jobs, "queued")), Some(count(jobs, "in_progress"))),
            None => (None, None),
        };
        let github_ok = jobs.is_some();

        let observed = match self.observe_cluster() {
            Ok(obs) => obs,
            Err(e) => {
                let e = self.kube_failure(e)?;
                let record = ReconcileRecord {
                    time: self.clock.now(),
                    tick,
                    queued,
                    in_progress,
                    observed: None,
                    desired: None,
                    reason: None,
                    wrote_scale: false,
                    github_ok,
                    last_active: self.state.last_active,
                    error: Some(join_errors(github_error, Some(e.to_string()))),
                };
                return Ok(self.emit(record));
            }
        };
        let (scale, pods) = observed;
        let now = self.clock.now();
        let observation = Observation {
            outstanding_jobs: jobs.unwrap_or_default(),
            scale,
            pods,
            polled_at: now,
            github_poll_ok: github_ok,
        };
        let decision = compute_desired(&observation, &self.state, &policy, now);

        if self.shutdown.is_requested() {
            return Ok(TickOutcome::Abandoned);
        }
        let mut written = None;
        let mut kube_error = None;
        if decision.target_replicas != observation.scale.spec_replicas {
            match self.kube.write_scale(&self.settings.deployment, decision.target_replicas) {
                Ok(_) => written = Some(decision.target_replicas),
                Err(e) => kube_error = Some(self.kube_failure(e)?.to_string()),
            }
        }
        self.state = update_state(&self.state, &decision, &observation, now, written);
        if let Err(e) = self.persist_annotations() {
            kube_error = Some(self.kube_failure(e)?.to_string());
        }
        if kube_error.is_none() {
            self.consecutive_kube_errors = 0;
        }

        tracing::debug!(
            target = decision.target_replicas,
            reason = decision.reason.as_str(),
            observed = observation.scale.spec_replicas,
            "reconciled"
        );
        let record = ReconcileRecord {
            time: now,
            tick,
            queued,
            in_progress,
            observed: Some(observation.scale.spec_replicas),
            desired: Some(decision.target_replicas),
            reason: Some(decision.reason),
            wrote_scale: written.is_some(),
            github_ok,
            last_active: self.state.last_active,
            error: (github_error.is_some() || kube_error.is_some()).then(|| join_errors(github_error, kube_error)),
        };
        Ok(self.emit(record))
    }

    fn observe_cluster(&mut self) -> Result<(crate::kube::ScaleSnapshot, Vec<crate::kube::PodInfo>), KubeError> {
        if !self.persisted.hydrated {
            self.hydrate()?;
        }
        let scale = self.kube.read_scale(&self.settings.deployment)?;
        let pods = self.kube.list_runner_pods(&self.settings.pod_selector)?;
        Ok((scale, pods))
    }

    /// Restores bookkeeping written by a previous manager instance.
    fn hydrate(&mut self) -> Result<(), KubeError> {
        let annotations = self.kube.read_annotations(&self.settings.deployment)?;
        let stored = |key: &str| annotations.get(key).and_then(|v| parse_rfc3339(v));
        if let Some(at) = stored(LAST_ACTIVE_ANNOTATION) {
            self.state.last_active = Some(self.state.last_active.map_or(at, |prev| prev.max(at)));
        }
        if self.state.keepalive_started_at.is_none() {
            self.state.keepalive_started_at = stored(KEEPALIVE_ANNOTATION);
        }
        for key in [LAST_ACTIVE_ANNOTATION, KEEPALIVE_ANNOTATION] {
            self.persisted.annotations.insert(key, annotations.get(key).cloned());
        }
        self.persisted.hydrated = true;
        tracing::info!(
            last_active = ?self.state.last_active,
            keepalive_started = ?self.state.keepalive_started_at,
            "restored state from deployment annotations"
        );
        Ok(())
    }

    fn persist_annotations(&mut self) -> Result<(), KubeError> {
        let wanted = [
            (LAST_ACTIVE_ANNOTATION, self.state.last_active.map(rfc3339)),
            (KEEPALIVE_ANNOTATION, self.state.keepalive_started_at.map(rfc3339)),
        ];
        for (key, value) in wanted {
            if self.persisted.annotations.get(key).cloned().flatten() == value {
                continue;
            }
            match &value {
                Some(v) => self.kube.write_annotation(&self.settings.deployment, key, v)?,
                None => self.kube.remove_annotation(&self.settings.deployment, key)?,
            }
            self.persisted.annotations.insert(key, value);
        }
        Ok(())
    }

    /// Fatal and credential errors propagate; anything else is logged and
    /// handed back for the record.
    fn kube_failure(&mut self, e: KubeError) -> Result<KubeError, ReconcileError> {
        self.consecutive_kube_errors += 1;
        match e {
            KubeError::MissingDeployment(_) => Err(ReconcileError::Fatal(e)),
            KubeError::Credential { .. } => Err(ReconcileError::KubeCredential(e)),
            other => {
                tracing::warn!(error = %other, "Kubernetes call failed");
                Ok(other)
            }
        }
    }

    fn emit(&mut self, record: ReconcileRecord) -> TickOutcome {
        self.sink.record(&record);
        self.last_record = Some(record.clone());
        TickOutcome::Completed(record)
    }
}

fn count(jobs: &[JobRecord], status: &str) -> usize {
    jobs.iter().filter(|j| j.status == status).count()
}

fn join_errors(a: Option<String>, b: Option<String>) -> String {
    [a, b].into_iter().flatten().collect::<Vec<_>>().join("; ")
}
