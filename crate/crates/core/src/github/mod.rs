//! GitHub Actions REST client: outstanding-job discovery and runner
//! registration tokens.

pub mod backoff;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{parse_rfc3339, Clock};
use crate::http::{HttpRequest, HttpResponse, Method, Transport};
use crate::labels::{job_matches_labels, LabelSet};
use crate::repo::RepoCoordinates;
use crate::secret::SecretToken;

pub use backoff::{execute_with_backoff, BackoffSchedule, BackoffState};

pub const API_VERSION: &str = "2022-11-28";
pub const ACCEPT: &str = "application/vnd.github+json";
pub const DEFAULT_API_BASE: &str = "https://api.github.com";
pub const PER_PAGE: usize = 100;
const MAX_PAGES: u32 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GithubError {
    #[error("GitHub rejected the credential (HTTP {status})")]
    Credential { status: u16 },
    #[error("rate limited by GitHub (HTTP {status}, wait {retry_after:?})")]
    RateLimited { status: u16, retry_after: Option<Duration> },
    #[error("transient GitHub failure: {0}")]
    Transient(String),
    #[error("GitHub resource not found: {0}")]
    NotFound(String),
    #[error("unexpected GitHub response: {0}")]
    Protocol(String),
    #[error("backing off until {until}")]
    BackingOff { until: DateTime<Utc> },
    #[error("interrupted by shutdown")]
    Interrupted,
}

impl GithubError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GithubError::RateLimited { .. } | GithubError::Transient(_) | GithubError::BackingOff { .. })
    }

    pub fn is_credential(&self) -> bool {
        matches!(self, GithubError::Credential { .. })
    }

    /// Wait the server asked for, if any.
    pub fn server_wait(&self) -> Option<Duration> {
        match self {
            GithubError::RateLimited { retry_after, .. } => *retry_after,
            _ => None,
        }
    }
}

/// Maps a response onto the error taxonomy. 403 counts as a rate limit only
/// when GitHub marks it so (`x-ratelimit-remaining: 0` or `retry-after`).
pub fn classify_response(response: &HttpResponse, now: DateTime<Utc>) -> Result<(), GithubError> {
    let status = response.status;
    if response.is_success() {
        return Ok(());
    }
    let retry_after = response.header("retry-after").and_then(|v| parse_retry_after(v, now));
    let exhausted = response.header("x-ratelimit-remaining").map(str::trim) == Some("0");
    let reset_wait = response
        .header("x-ratelimit-reset")
        .and_then(|v| v.trim().parse::<i64>().ok())
        .map(|reset| Duration::from_secs((reset - now.timestamp()).max(0) as u64));
    match status {
        429 => Err(GithubError::RateLimited { status, retry_after: retry_after.or(reset_wait) }),
        403 if exhausted || retry_after.is_some() => {
            Err(GithubError::RateLimited { status, retry_after: retry_after.or(reset_wait) })
        }
        401 | 403 => Err(GithubError::Credential { status }),
        404 => Err(GithubError::NotFound(format!("HTTP 404: {}", response.body_snippet()))),
        500..=599 => Err(GithubError::Transient(format!("HTTP {status}"))),
        _ => Err(GithubError::Protocol(format!("HTTP {status}: {}", response.body_snippet()))),
    }
}

fn parse_retry_after(value: &str, now: DateTime<Utc>) -> Option<Duration> {
    let value = value.trim();
    if let Ok(secs) = value.parse::<u64>() {
        return Some(Duration::from_secs(secs));
    }
    DateTime::parse_from_rfc2822(value).ok().map(|at| (at.with_timezone(&Utc) - now).to_std().unwrap_or(Duration::ZERO))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub run_id: u64,
    pub status: String,
    pub requested_labels: LabelSet,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationToken {
    pub token: SecretToken,
    pub expires_at: DateTime<Utc>,
}

#[derive(Deserialize)]
struct RunsPage {
    workflow_runs: Vec<WireRun>,
}

#[derive(Deserialize)]
struct WireRun {
    id: u64,
    status: Option<String>,
}

#[derive(Deserialize)]
struct JobsPage {
    jobs: Vec<WireJob>,
}

#[derive(Deserialize)]
struct WireJob {
    id: u64,
    run_id: u64,
    status: String,
    #[serde(default)]
    labels: Vec<String>,
    created_at: String,
}

#[derive(Deserialize)]
struct WireToken {
    token: Option<String>,
    expires_at: Option<String>,
}

pub struct GithubClient {
    transport: Arc<dyn Transport>,
    api_base: String,
    token: SecretToken,
    clock: Arc<dyn Clock>,
    backoff: BackoffState,
    schedule: BackoffSchedule,
    user_agent: String,
}

impl GithubClient {
    pub fn new(transport: Arc<dyn Transport>, api_base: &str, token: SecretToken, clock: Arc<dyn Clock>) -> Self {
        Self {
            transport,
            api_base: api_base.trim_end_matches('/').to_string(),
            token,
            clock,
            backoff: BackoffState::default(),
            schedule: BackoffSchedule::default(),
            user_agent: format!("runner-manager/{}", env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn backoff(&self) -> &BackoffState {
        &self.backoff
    }

    fn request(&self, method: Method, path_and_query: &str) -> HttpRequest {
        HttpRequest::new(method, format!("{}{}", self.api_base, path_and_query))
            .with_header("Authorization", format!("Bearer {}", self.token.expose()))
            .with_header("Accept", ACCEPT)
            .with_header("X-GitHub-Api-Version", API_VERSION)
            .with_header("User-Agent", self.user_agent.clone())
    }

    fn call(&mut self, request: HttpRequest, deadline: DateTime<Utc>) -> Result<HttpResponse, GithubError> {
        let transport = &self.transport;
        let clock = self.clock.as_ref();
        execute_with_backoff(&mut self.backoff, &self.schedule, clock, deadline, || {
            let response = transport.send(&request).map_err(|e| GithubError::Transient(e.to_string()))?;
            classify_response(&response, clock.now())?;
            Ok(response)
        })
    }

    fn get_json<T: for<'de> Deserialize<'de>>(
        &mut self,
        path_and_query: &str,
        deadline: DateTime<Utc>,
    ) -> Result<T, GithubError> {
        let request = self.request(Method::Get, path_and_query);
        let response = self.call(request, deadline)?;
        serde_json::from_slice(&response.body).map_err(|e| GithubError::Protocol(format!("{path_and_query}: {e}")))
    }

    /// Every workflow run currently in `status`, across all pages.
    pub fn list_runs(
        &mut self,
        repo: &RepoCoordinates,
        status: &str,
        deadline: DateTime<Utc>,
    ) -> Result<Vec<RunRecord>, GithubError> {
        let mut runs = Vec::new();
        for page in 1..=MAX_PAGES {
            let path = format!(
                "/repos/{}/{}/actions/runs?status={}&per_page={PER_PAGE}&page={page}",
                repo.owner(),
                repo.repo(),
                status
            );
            let body: RunsPage = self.get_json(&path, deadline)?;
            let n = body.workflow_runs.len();
            runs.extend(
                body.workflow_runs
                    .into_iter()
                    .map(|r| RunRecord { run_id: r.id, status: r.status.unwrap_or_else(|| status.to_string()) }),
            );
            if n < PER_PAGE {
                break;
            }
        }
        Ok(runs)
    }

    pub fn list_run_jobs(
        &mut self,
        repo: &RepoCoordinates,
        run_id: u64,
        deadline: DateTime<Utc>,
    ) -> Result<Vec<JobRecord>, GithubError> {
        let mut jobs = Vec::new();
        for page in 1..=MAX_PAGES {
            let path = format!(
                "/repos/{}/{}/actions/runs/{run_id}/jobs?per_page={PER_PAGE}&page={page}",
                repo.owner(),
                repo.repo()
            );
            let body: JobsPage = self.get_json(&path, deadline)?;
            let n = body.jobs.len();
            for job in body.jobs {
                let created_at = parse_rfc3339(&job.created_at).ok_or_else(|| {
                    GithubError::Protocol(format!("job {} has bad created_at {:?}", job.id, job.created_at))
                })?;
                jobs.push(JobRecord {
                    job_id: job.id,
                    run_id: job.run_id,
                    status: job.status,
                    requested_labels: LabelSet::new(&job.labels),
                    created_at,
                });
            }
            if n < PER_PAGE {
                break;
            }
        }
        Ok(jobs)
    }

    /// Jobs whose status is in `statuses` and whose requested labels are all
    /// served by `runner_labels`, ordered by `(created_at, job_id)`.
    ///
    /// Runs are enumerated for every non-terminal run status (a run that is
    /// `in_progress` can still hold queued jobs), then each run's jobs are
    /// filtered client-side.
    pub fn list_outstanding_jobs(
        &mut self,
        repo: &RepoCoordinates,
        statuses: &BTreeSet<String>,
        runner_labels: &LabelSet,
        deadline: DateTime<Utc>,
    ) -> Result<Vec<JobRecord>, GithubError> {
        let mut run_statuses: Vec<String> = vec!["queued".into(), "in_progress".into()];
        for s in statuses {
            if !run_statuses.contains(s) {
                run_statuses.push(s.clone());
            }
        }
        let mut runs = BTreeMap::new();
        for status in &run_statuses {
            for run in self.list_runs(repo, status, deadline)? {
                runs.entry(run.run_id).or_insert(run);
            }
        }
        let mut seen = BTreeSet::new();
        let mut jobs = Vec::new();
        for run_id in runs.keys() {
            for job in self.list_run_jobs(repo, *run_id, deadline)? {
                if statuses.contains(&job.status)
                    && job_matches_labels(&job.requested_labels, runner_labels)
                    && seen.insert(job.job_id)
                {
                    jobs.push(job);
                }
            }
        }
        jobs.sort_by_key(|j| (j.created_at, j.job_id));
        Ok(jobs)
    }

    pub fn create_registration_token(
        &mut self,
        repo: &RepoCoordinates,
        deadline: DateTime<Utc>,
    ) -> Result<RegistrationToken, GithubError> {
        let path = format!("/repos/{}/{}/actions/runners/registration-token", repo.owner(), repo.repo());
        let request = self.request(Method::Post, &path);
        let response = self.call(request, deadline)?;
        let wire: WireToken = serde_json::from_slice(&response.body)
            .map_err(|e| GithubError::Protocol(format!("registration token: {e}")))?;
        let token = wire
            .token
            .filter(|t| !t.is_empty())
            .ok_or_else(|| GithubError::Protocol("registration token response lacks token".into()))?;
        let expires_at = wire
            .expires_at
            .as_deref()
            .and_then(parse_rfc3339)
            .ok_or_else(|| GithubError::Protocol("registration token response lacks expires_at".into()))?;
        if expires_at <= self.clock.now() {
            return Err(GithubError::Protocol(format!("registration token already expired at {expires_at}")));
        }
        Ok(RegistrationToken { token: SecretToken::new(token), expires_at })
    }
}
