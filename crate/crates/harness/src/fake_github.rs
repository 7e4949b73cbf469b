//! In-memory GitHub Actions REST surface: workflow runs, jobs, registration
//! tokens, plus a minimal runner protocol used by the fake runner.
//!
//! Jobs move `queued -> in_progress` only when a registered runner claims
//! them and `in_progress -> completed` after their scripted duration (or a
//! scripted `complete_job`).

use std::collections::{BTreeMap, BTreeSet};

use runner_manager::github::{ACCEPT, API_VERSION};
use runner_manager::http::{HttpRequest, HttpResponse, Method};
use runner_manager::labels::LabelSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fake_runner::{Assignment, Registered, RunnerApi};
use crate::scenario::{to_datetime, SimTime};
use crate::trace::Actor;
use crate::wire::{actor_of, Outbox, RequestLogEntry, WireReport};

#[derive(Clone, Debug)]
pub struct FakeGithubConfig {
    pub owner: String,
    pub repo: String,
    /// Token the manager must present.
    pub pat: String,
    /// Value handed out by the registration-token endpoint.
    pub registration_token: String,
    pub log_requests: bool,
}

impl Default for FakeGithubConfig {
    fn default() -> Self {
        Self {
            owner: "biocore".into(),
            repo: "unifrac".into(),
            pat: "github_pat_harness".into(),
            registration_token: "REG-abc".into(),
            log_requests: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    InProgress,
    Completed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::InProgress => "in_progress",
            JobStatus::Completed => "completed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FakeJob {
    pub id: u64,
    pub run_id: u64,
    pub labels: Vec<String>,
    pub requested: LabelSet,
    pub duration: Option<u64>,
    pub created_at: SimTime,
    pub status: JobStatus,
    pub claimed_by: Option<u64>,
    pub claimed_at: Option<SimTime>,
    pub completed_at: Option<SimTime>,
}

#[derive(Clone, Debug)]
struct RunnerSession {
    name: String,
    labels: LabelSet,
    credential: String,
    current: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
struct RateWindow {
    start: SimTime,
    end: SimTime,
    status: u16,
    retry_after: u64,
}

pub struct FakeGithub {
    cfg: FakeGithubConfig,
    jobs: BTreeMap<u64, FakeJob>,
    runs: BTreeMap<u64, Vec<u64>>,
    run_created: BTreeMap<u64, SimTime>,
    next_run: u64,
    fault: Option<u16>,
    rate_limits: Vec<RateWindow>,
    runners: BTreeMap<u64, RunnerSession>,
    next_runner: u64,
    credential_renewed_at: SimTime,
    max_credential_age: SimTime,
    wire: WireReport,
    log: Vec<RequestLogEntry>,
    outbox: Outbox,
}

fn status_json(status: u16, message: &str) -> HttpResponse {
    HttpResponse::json(status, &json!({"message": message, "documentation_url": "https://docs.github.com/rest"}))
}

impl FakeGithub {
    /// `credential_issued_at` is when the runner's credential was last
    /// renewed before the scenario began.
    pub fn new(cfg: FakeGithubConfig, credential_issued_at: SimTime) -> Self {
        Self {
            cfg,
            jobs: BTreeMap::new(),
            runs: BTreeMap::new(),
            run_created: BTreeMap::new(),
            next_run: 1000,
            fault: None,
            rate_limits: Vec::new(),
            runners: BTreeMap::new(),
            next_runner: 1,
            credential_renewed_at: credential_issued_at,
            max_credential_age: 0,
            wire: WireReport::default(),
            log: Vec::new(),
            outbox: Outbox::default(),
        }
    }

    pub fn config(&self) -> &FakeGithubConfig {
        &self.cfg
    }

    pub fn job(&self, id: u64) -> Option<&FakeJob> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &FakeJob> {
        self.jobs.values()
    }

    /// Runners currently registered.
    pub fn runner_count(&self) -> usize {
        self.runners.len()
    }

    pub fn wire(&self) -> &WireReport {
        &self.wire
    }

    pub fn request_log(&self) -> &[RequestLogEntry] {
        &self.log
    }

    pub fn drain_outbox(&mut self) -> Vec<(SimTime, Actor, String, Value)> {
        self.outbox.drain()
    }

    pub fn enqueue_job(
        &mut self,
        id: u64,
        labels: Vec<String>,
        duration: Option<u64>,
        run_with: Option<u64>,
        now: SimTime,
    ) {
        let run_id = match run_with.and_then(|j| self.jobs.get(&j)).map(|j| j.run_id) {
            Some(run) => run,
            None => {
                let run = self.next_run;
                self.next_run += 1;
                self.run_created.insert(run, now);
                run
            }
        };
        self.runs.entry(run_id).or_default().push(id);
        let requested = LabelSet::new(&labels);
        self.outbox.push(
            now,
            Actor::FakeGithub,
            "job_enqueued",
            json!({"job": id, "run": run_id, "labels": labels, "duration_secs": duration}),
        );
        self.jobs.insert(
            id,
            FakeJob {
                id,
                run_id,
                labels,
                requested,
                duration,
                created_at: now,
                status: JobStatus::Queued,
                claimed_by: None,
                claimed_at: None,
                completed_at: None,
            },
        );
    }

    pub fn complete_job(&mut self, id: u64, now: SimTime) {
        if let Some(job) = self.jobs.get_mut(&id) {
            if job.status != JobStatus::Completed {
                job.status = JobStatus::Completed;
                job.completed_at = Some(now);
                self.outbox.push(now, Actor::FakeGithub, "job_completed", json!({"job": id, "scripted": true}));
            }
        }
    }

    pub fn set_fault(&mut self, status: Option<u16>, now: SimTime) {
        self.fault = status;
        let action = if status.is_some() { "fault_started" } else { "fault_cleared" };
        self.outbox.push(now, Actor::FakeGithub, action, json!({"status": status}));
    }

    pub fn add_rate_limit(&mut self, status: u16, retry_after: u64, duration: u64, now: SimTime) {
        self.rate_limits.retain(|w| w.end > now);
        self.rate_limits.push(RateWindow { start: now, end: now + duration as SimTime, status, retry_after });
        self.outbox.push(
            now,
            Actor::FakeGithub,
            "rate_limit_started",
            json!({"status": status, "retry_after_secs": retry_after, "until": now + duration as SimTime}),
        );
    }

    /// Completes every claimed job whose duration has elapsed by `now`.
    pub fn settle(&mut self, now: SimTime) {
        for job in self.jobs.values_mut() {
            if job.status != JobStatus::InProgress {
                continue;
            }
            if let (Some(claimed), Some(d)) = (job.claimed_at, job.duration) {
                let end = claimed + d as SimTime;
                if end <= now {
                    job.status = JobStatus::Completed;
                    job.completed_at = Some(end);
                    self.outbox.push(end, Actor::FakeGithub, "job_completed", json!({"job": job.id}));
                }
            }
        }
    }

    pub fn next_completion(&self) -> Option<SimTime> {
        self.jobs
            .values()
            .filter(|j| j.status == JobStatus::InProgress)
            .filter_map(|j| Some(j.claimed_at? + j.duration? as SimTime))
            .min()
    }

    /// Ground truth: jobs a runner with `labels` could serve whose status
    /// is in `statuses`.
    pub fn outstanding_matching(&self, statuses: &BTreeSet<String>, labels: &LabelSet) -> usize {
        self.jobs.values().filter(|j| statuses.contains(j.status.as_str()) && j.requested.is_subset(labels)).count()
    }

    /// Longest stretch, up to `now`, without any runner contacting GitHub.
    pub fn max_credential_age(&self, now: SimTime) -> SimTime {
        self.max_credential_age.max(now - self.credential_renewed_at)
    }

    fn renew(&mut self, now: SimTime) {
        self.max_credential_age = self.max_credential_age.max(now - self.credential_renewed_at);
        self.credential_renewed_at = now;
    }

    /// A runner vanished without deregistering (its pod was deleted).
    pub fn runner_lost(&mut self, runner_id: u64, now: SimTime) {
        if let Some(session) = self.runners.remove(&runner_id) {
            self.release(session.current, now);
            self.outbox.push(now, Actor::FakeGithub, "runner_lost", json!({"runner": runner_id, "name": session.name}));
        }
    }

    fn release(&mut self, job: Option<u64>, now: SimTime) {
        if let Some(job) = job.and_then(|id| self.jobs.get_mut(&id)) {
            if job.status == JobStatus::InProgress {
                job.status = JobStatus::Queued;
                job.claimed_by = None;
                job.claimed_at = None;
                self.outbox.push(now, Actor::FakeGithub, "job_requeued", json!({"job": job.id}));
            }
        }
    }

    fn active_rate_limit(&self, now: SimTime) -> Option<RateWindow> {
        self.rate_limits.iter().filter(|w| w.start <= now && now < w.end).max_by_key(|w| w.start).copied()
    }

    fn run_status(&self, run: u64) -> JobStatus {
        let jobs = &self.runs[&run];
        let statuses: Vec<JobStatus> = jobs.iter().map(|j| self.jobs[j].status).collect();
        if statuses.iter().all(|s| *s == JobStatus::Completed) {
            JobStatus::Completed
        } else if statuses.iter().all(|s| *s == JobStatus::Queued) {
            JobStatus::Queued
        } else {
            JobStatus::InProgress
        }
    }

    fn job_json(&self, job: &FakeJob) -> Value {
        let runner_name = job.claimed_by.and_then(|r| self.runners.get(&r)).map(|r| r.name.clone());
        json!({
            "id": job.id,
            "run_id": job.run_id,
            "name": format!("job-{}", job.id),
            "status": job.status.as_str(),
            "conclusion": (job.status == JobStatus::Completed).then_some("success"),
            "labels": job.labels,
            "created_at": runner_manager::clock::rfc3339(to_datetime(job.created_at)),
            "started_at": job.claimed_at.map(|t| runner_manager::clock::rfc3339(to_datetime(t))),
            "completed_at": job.completed_at.map(|t| runner_manager::clock::rfc3339(to_datetime(t))),
            "runner_id": job.claimed_by,
            "runner_name": runner_name,
        })
    }

    /// Serves one HTTP request at simulated time `now`.
    pub fn handle(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        self.settle(now);
        let actor = actor_of(req);
        if actor == Actor::Manager {
            self.check_wire(req);
        }
        let response = self.route(req, now);
        if self.cfg.log_requests {
            self.log.push(RequestLogEntry::new(now, actor, req, response.status));
        }
        response
    }

    fn check_wire(&mut self, req: &HttpRequest) {
        self.wire.requests += 1;
        let expected_auth = format!("Bearer {}", self.cfg.pat);
        let mut problems = Vec::new();
        if req.header("authorization") != Some(expected_auth.as_str()) {
            problems.push("missing or wrong bearer token");
        }
        if req.header("accept") != Some(ACCEPT) {
            problems.push("wrong Accept header");
        }
        if req.header("x-github-api-version") != Some(API_VERSION) {
            problems.push("wrong X-GitHub-Api-Version");
        }
        for p in problems {
            self.wire.violation(format!("{} {}: {p}", req.method.as_str(), req.path()));
        }
    }

    fn route(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        let path = req.path().to_string();
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        let rest = match segments.as_slice() {
            ["repos", owner, repo, "actions", rest @ ..] => {
                if *owner != self.cfg.owner || *repo != self.cfg.repo {
                    return status_json(404, "Not Found");
                }
                rest.to_vec()
            }
            _ => return status_json(404, "Not Found"),
        };
        match (req.method, rest.as_slice()) {
            (Method::Post, ["runners", "register"]) => return self.http_register(req, now),
            (Method::Post, ["runners", id, "acquire"]) => return self.http_acquire(req, id, now),
            (Method::Get, ["runners", id, "jobs", job]) => return self.http_job_status(req, id, job, now),
            (Method::Delete, ["runners", id]) => return self.http_deregister(req, id, now),
            _ => {}
        }

        let expected = format!("Bearer {}", self.cfg.pat);
        if req.header("authorization") != Some(expected.as_str()) {
            return status_json(401, "Bad credentials");
        }
        if let Some(w) = self.active_rate_limit(now) {
            return if w.status == 429 {
                status_json(429, "You have exceeded a secondary rate limit.")
                    .with_header("Retry-After", w.retry_after.to_string())
            } else {
                status_json(403, "API rate limit exceeded")
                    .with_header("x-ratelimit-remaining", "0")
                    .with_header("x-ratelimit-reset", (to_datetime(now).timestamp() + w.retry_after as i64).to_string())
            };
        }
        if let Some(status) = self.fault {
            return status_json(status, "Server Error");
        }
        let per_page = req.query("per_page").and_then(|v| v.parse::<usize>().ok()).unwrap_or(30).clamp(1, 100);
        let page = req.query("page").and_then(|v| v.parse::<usize>().ok()).unwrap_or(1).max(1);
        match (req.method, rest.as_slice()) {
            (Method::Get, ["runs"]) => {
                let wanted = req.query("status");
                let runs: Vec<u64> = self
                    .runs
                    .keys()
                    .rev()
                    .copied()
                    .filter(|r| wanted.as_deref().is_none_or(|w| self.run_status(*r).as_str() == w))
                    .collect();
                let items: Vec<Value> = runs
                    .iter()
                    .skip((page - 1) * per_page)
                    .take(per_page)
                    .map(|r| {
                        json!({
                            "id": r,
                            "name": "ci",
                            "status": self.run_status(*r).as_str(),
                            "created_at": runner_manager::clock::rfc3339(to_datetime(self.run_created[r])),
                        })
                    })
                    .collect();
                HttpResponse::json(200, &json!({"total_count": runs.len(), "workflow_runs": items}))
            }
            (Method::Get, ["runs", run, "jobs"]) => {
                let Some(jobs) = run.parse::<u64>().ok().and_then(|r| self.runs.get(&r)) else {
                    return status_json(404, "Not Found");
                };
                let items: Vec<Value> = jobs
                    .iter()
                    .skip((page - 1) * per_page)
                    .take(per_page)
                    .map(|j| self.job_json(&self.jobs[j]))
                    .collect();
                HttpResponse::json(200, &json!({"total_count": jobs.len(), "jobs": items}))
            }
            (Method::Post, ["runners", "registration-token"]) => HttpResponse::json(
                201,
                &json!({
                    "token": self.cfg.registration_token,
                    "expires_at": runner_manager::clock::rfc3339(to_datetime(now + 3600)),
                }),
            ),
            _ => status_json(404, "Not Found"),
        }
    }

    fn session_auth(&self, req: &HttpRequest, id: &str) -> Result<u64, HttpResponse> {
        let id: u64 = id.parse().map_err(|_| status_json(404, "Not Found"))?;
        let session = self.runners.get(&id).ok_or_else(|| status_json(404, "Not Found"))?;
        let expected = format!("Bearer {}", session.credential);
        if req.header("authorization") != Some(expected.as_str()) {
            return Err(status_json(401, "Bad credentials"));
        }
        Ok(id)
    }

    fn http_register(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        #[derive(Deserialize)]
        struct Body {
            token: String,
            name: String,
            labels: Vec<String>,
        }
        let Ok(body) = serde_json::from_slice::<Body>(&req.body) else {
            return status_json(400, "Problems parsing JSON");
        };
        match self.register(&body.token, &body.name, &LabelSet::new(&body.labels), now) {
            Ok(r) => HttpResponse::json(201, &json!({"id": r.id, "credential": r.credential})),
            Err(e) => status_json(401, &e),
        }
    }

    fn http_acquire(&mut self, req: &HttpRequest, id: &str, now: SimTime) -> HttpResponse {
        let id = match self.session_auth(req, id) {
            Ok(id) => id,
            Err(resp) => return resp,
        };
        let credential = self.runners[&id].credential.clone();
        match self.acquire(id, &credential, now) {
            Ok(Some(a)) => HttpResponse::json(
                200,
                &json!({"job_id": a.job_id, "run_id": a.run_id, "labels": a.labels, "duration_secs": a.duration_secs}),
            ),
            Ok(None) => HttpResponse::new(204),
            Err(e) => status_json(409, &e),
        }
    }

    fn http_job_status(&mut self, req: &HttpRequest, id: &str, job: &str, now: SimTime) -> HttpResponse {
        let id = match self.session_auth(req, id) {
            Ok(id) => id,
            Err(resp) => return resp,
        };
        let credential = self.runners[&id].credential.clone();
        let Ok(job) = job.parse::<u64>() else {
            return status_json(404, "Not Found");
        };
        match self.job_status(id, &credential, job, now) {
            Ok(status) => HttpResponse::json(200, &json!({"id": job, "status": status})),
            Err(e) => status_json(404, &e),
        }
    }

    fn http_deregister(&mut self, req: &HttpRequest, id: &str, now: SimTime) -> HttpResponse {
        let id = match self.session_auth(req, id) {
            Ok(id) => id,
            Err(resp) => return resp,
        };
        let credential = self.runners[&id].credential.clone();
        match self.deregister(id, &credential, now) {
            Ok(()) => HttpResponse::new(204),
            Err(e) => status_json(404, &e),
        }
    }

    fn session(&mut self, id: u64, credential: &str) -> Result<&mut RunnerSession, String> {
        match self.runners.get_mut(&id) {
            Some(s) if s.credential == credential => Ok(s),
            Some(_) => Err("bad runner credential".into()),
            None => Err(format!("runner {id} is not registered")),
        }
    }
}

impl RunnerApi for FakeGithub {
    fn register(&mut self, token: &str, name: &str, labels: &LabelSet, now: SimTime) -> Result<Registered, String> {
        if token != self.cfg.registration_token {
            return Err("invalid registration token".into());
        }
        let replaced: Vec<u64> = self.runners.iter().filter(|(_, s)| s.name == name).map(|(id, _)| *id).collect();
        for id in replaced {
            self.runner_lost(id, now);
        }
        let id = self.next_runner;
        self.next_runner += 1;
        let credential = format!("runner-cred-{id}");
        self.runners.insert(
            id,
            RunnerSession {
                name: name.to_string(),
                labels: labels.clone(),
                credential: credential.clone(),
                current: None,
            },
        );
        self.renew(now);
        self.outbox.push(
            now,
            Actor::FakeGithub,
            "runner_registered",
            json!({"runner": id, "name": name, "labels": labels}),
        );
        Ok(Registered { id, credential })
    }

    fn acquire(&mut self, id: u64, credential: &str, now: SimTime) -> Result<Option<Assignment>, String> {
        let labels = {
            let s = self.session(id, credential)?;
            if s.current.is_some() {
                return Err("runner already holds a job".into());
            }
            s.labels.clone()
        };
        self.renew(now);
        let pick = self
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Queued && j.requested.is_subset(&labels))
            .min_by_key(|j| (j.created_at, j.id))
            .map(|j| j.id);
        let Some(job_id) = pick else {
            return Ok(None);
        };
        let job = self.jobs.get_mut(&job_id).expect("picked job exists");
        job.status = JobStatus::InProgress;
        job.claimed_by = Some(id);
        job.claimed_at = Some(now);
        let assignment =
            Assignment { job_id, run_id: job.run_id, labels: job.labels.clone(), duration_secs: job.duration };
        self.runners.get_mut(&id).expect("session exists").current = Some(job_id);
        self.outbox.push(now, Actor::FakeGithub, "job_claimed", json!({"job": job_id, "runner": id}));
        Ok(Some(assignment))
    }

    fn job_status(&mut self, id: u64, credential: &str, job: u64, now: SimTime) -> Result<String, String> {
        self.session(id, credential)?;
        self.renew(now);
        let status = self.jobs.get(&job).map(|j| j.status).ok_or_else(|| format!("no job {job}"))?;
        if status != JobStatus::InProgress {
            let s = self.runners.get_mut(&id).expect("session exists");
            if s.current == Some(job) {
                s.current = None;
            }
        }
        Ok(status.as_str().to_string())
    }

    fn deregister(&mut self, id: u64, credential: &str, now: SimTime) -> Result<(), String> {
        self.session(id, credential)?;
        let session = self.runners.remove(&id).expect("session exists");
        self.release(session.current, now);
        self.renew(now);
        self.outbox.push(now, Actor::FakeGithub, "runner_deregistered", json!({"runner": id}));
        Ok(())
    }
}
