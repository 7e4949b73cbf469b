//! Fake self-hosted runner. [`RunnerCore`] is the state machine; it runs
//! in-process against [`FakeGithub`](crate::fake_github::FakeGithub) in
//! simulations, and over HTTP inside the `fake-runner` binary.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use runner_manager::bootstrap::{read_registration, PERSISTENT_DIR_ENV, WORK_DIR_ENV};
use runner_manager::clock::{Clock, Shutdown};
use runner_manager::http::{HttpRequest, Method, Transport};
use runner_manager::labels::LabelSet;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::scenario::SimTime;

pub const USER_AGENT: &str = concat!("fake-runner/", env!("CARGO_PKG_VERSION"));
/// Milliseconds between runner polls in the standalone binary.
pub const POLL_MS_ENV: &str = "FAKE_RUNNER_POLL_MS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub job_id: u64,
    pub run_id: u64,
    pub labels: Vec<String>,
    pub duration_secs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub id: u64,
    pub credential: String,
}

/// The slice of the GitHub runner protocol the fake runner speaks.
pub trait RunnerApi {
    fn register(&mut self, token: &str, name: &str, labels: &LabelSet, now: SimTime) -> Result<Registered, String>;
    fn acquire(&mut self, id: u64, credential: &str, now: SimTime) -> Result<Option<Assignment>, String>;
    fn job_status(&mut self, id: u64, credential: &str, job: u64, now: SimTime) -> Result<String, String>;
    fn deregister(&mut self, id: u64, credential: &str, now: SimTime) -> Result<(), String>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunnerEvent {
    Registered { id: u64 },
    Claimed(Assignment),
    Finished { job_id: u64, status: String },
    Error(String),
}

#[derive(Clone, Debug)]
pub struct RunnerCore {
    pub name: String,
    pub labels: LabelSet,
    registration_token: String,
    registered: Option<Registered>,
    current: Option<Assignment>,
}

impl RunnerCore {
    pub fn new(name: impl Into<String>, labels: LabelSet, registration_token: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            labels,
            registration_token: registration_token.into(),
            registered: None,
            current: None,
        }
    }

    pub fn runner_id(&self) -> Option<u64> {
        self.registered.as_ref().map(|r| r.id)
    }

    pub fn current(&self) -> Option<&Assignment> {
        self.current.as_ref()
    }

    /// One poll: register if needed, report on the held job, then ask for
    /// new work if idle.
    pub fn tick<A: RunnerApi + ?Sized>(&mut self, api: &mut A, now: SimTime) -> Vec<RunnerEvent> {
        let mut events = Vec::new();
        if self.registered.is_none() {
            match api.register(&self.registration_token, &self.name, &self.labels, now) {
                Ok(r) => {
                    events.push(RunnerEvent::Registered { id: r.id });
                    self.registered = Some(r);
                }
                Err(e) => {
                    events.push(RunnerEvent::Error(e));
                    return events;
                }
            }
        }
        let reg = self.registered.clone().expect("registered above");
        if let Some(job) = self.current.clone() {
            match api.job_status(reg.id, &reg.credential, job.job_id, now) {
                Ok(status) if status == "in_progress" => return events,
                Ok(status) => {
                    self.current = None;
                    events.push(RunnerEvent::Finished { job_id: job.job_id, status });
                }
                Err(e) => {
                    events.push(RunnerEvent::Error(e));
                    return events;
                }
            }
        }
        match api.acquire(reg.id, &reg.credential, now) {
            Ok(Some(a)) => {
                self.current = Some(a.clone());
                events.push(RunnerEvent::Claimed(a));
            }
            Ok(None) => {}
            Err(e) => events.push(RunnerEvent::Error(e)),
        }
        events
    }

    /// Deregisters; any held job goes back to the queue.
    pub fn shutdown<A: RunnerApi + ?Sized>(&mut self, api: &mut A, now: SimTime) -> Result<(), String> {
        match self.registered.take() {
            Some(reg) => {
                self.current = None;
                api.deregister(reg.id, &reg.credential, now)
            }
            None => Ok(()),
        }
    }
}

/// [`RunnerApi`] over HTTP against a fake GitHub server.
pub struct HttpRunnerApi<T> {
    transport: T,
    actions_url: String,
}

impl<T: Transport> HttpRunnerApi<T> {
    pub fn new(transport: T, api_base: &str, owner: &str, repo: &str) -> Self {
        Self { transport, actions_url: format!("{}/repos/{owner}/{repo}/actions", api_base.trim_end_matches('/')) }
    }

    fn call(
        &self,
        method: Method,
        path: &str,
        credential: Option<&str>,
        body: Option<serde_json::Value>,
    ) -> Result<(u16, serde_json::Value), String> {
        let mut req =
            HttpRequest::new(method, format!("{}{path}", self.actions_url)).with_header("User-Agent", USER_AGENT);
        if let Some(c) = credential {
            req = req.with_header("Authorization", format!("Bearer {c}"));
        }
        if let Some(b) = body {
            req = req.with_body("application/json", serde_json::to_vec(&b).expect("json serializes"));
        }
        let resp = self.transport.send(&req).map_err(|e| e.to_string())?;
        if !resp.is_success() {
            return Err(format!("{method} {path}: HTTP {} {}", resp.status, resp.body_snippet()));
        }
        let value = if resp.body.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::from_slice(&resp.body).map_err(|e| format!("{method} {path}: {e}"))?
        };
        Ok((resp.status, value))
    }
}

impl<T: Transport> RunnerApi for HttpRunnerApi<T> {
    fn register(&mut self, token: &str, name: &str, labels: &LabelSet, _now: SimTime) -> Result<Registered, String> {
        let labels: Vec<&str> = labels.iter().collect();
        let (_, v) = self.call(
            Method::Post,
            "/runners/register",
            None,
            Some(json!({"token": token, "name": name, "labels": labels})),
        )?;
        serde_json::from_value(v).map_err(|e| e.to_string())
    }

    fn acquire(&mut self, id: u64, credential: &str, _now: SimTime) -> Result<Option<Assignment>, String> {
        let (status, v) = self.call(Method::Post, &format!("/runners/{id}/acquire"), Some(credential), None)?;
        if status == 204 {
            return Ok(None);
        }
        serde_json::from_value(v).map(Some).map_err(|e| e.to_string())
    }

    fn job_status(&mut self, id: u64, credential: &str, job: u64, _now: SimTime) -> Result<String, String> {
        let (_, v) = self.call(Method::Get, &format!("/runners/{id}/jobs/{job}"), Some(credential), None)?;
        v["status"].as_str().map(str::to_string).ok_or_else(|| "job status missing".to_string())
    }

    fn deregister(&mut self, id: u64, credential: &str, _now: SimTime) -> Result<(), String> {
        self.call(Method::Delete, &format!("/runners/{id}"), Some(credential), None).map(|_| ())
    }
}

struct RunnerLog(std::fs::File);

impl RunnerLog {
    fn open(persistent_dir: &Path) -> std::io::Result<Self> {
        let dir = persistent_dir.join("_diag");
        std::fs::create_dir_all(&dir)?;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("runner.log"))?;
        Ok(Self(file))
    }

    fn line(&mut self, msg: &str) {
        let _ = writeln!(self.0, "{} {msg}", runner_manager::clock::rfc3339(chrono::Utc::now()));
    }
}

/// Workspace directory the runner uses for `job_id`.
pub fn job_workspace(work_dir: &Path, job_id: u64) -> PathBuf {
    work_dir.join("_work").join(format!("job-{job_id}"))
}

/// Entry point of the standalone fake runner: reads the registration the
/// bootstrap wrote, then polls until `shutdown`, deregistering on the way
/// out.
pub fn run_process(env: &HashMap<String, String>, clock: Arc<dyn Clock>, shutdown: &Shutdown) -> anyhow::Result<()> {
    let persistent =
        PathBuf::from(env.get(PERSISTENT_DIR_ENV).ok_or_else(|| anyhow::anyhow!("{PERSISTENT_DIR_ENV} is not set"))?);
    let work_dir = env.get(WORK_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| persistent.join("_work"));
    let poll = Duration::from_millis(env.get(POLL_MS_ENV).and_then(|v| v.parse().ok()).unwrap_or(1000));
    let reg = read_registration(&persistent)?;
    let mut log = RunnerLog::open(&persistent)?;
    log.line(&format!("starting runner {} for {}", reg.name, reg.url));

    let transport = runner_manager::http::UreqTransport::new(&runner_manager::http::TlsRoots::WebPki)?;
    let mut api = HttpRunnerApi::new(transport, &reg.api_base, &reg.owner, &reg.repo);
    let mut core = RunnerCore::new(reg.name.clone(), reg.labels.clone(), reg.token.clone());
    let start = clock.now();
    let now = || (clock.now() - start).num_seconds();
    let mut next = Instant::now();
    while !shutdown.is_requested() {
        if Instant::now() >= next {
            for event in core.tick(&mut api, now()) {
                match event {
                    RunnerEvent::Registered { id } => log.line(&format!("registered as runner {id}")),
                    RunnerEvent::Claimed(a) => {
                        let ws = job_workspace(&work_dir, a.job_id);
                        std::fs::create_dir_all(&ws)?;
                        std::fs::write(ws.join("job.json"), serde_json::to_vec_pretty(&a)?)?;
                        log.line(&format!("running job {} in {}", a.job_id, ws.display()));
                    }
                    RunnerEvent::Finished { job_id, status } => log.line(&format!("job {job_id} finished: {status}")),
                    RunnerEvent::Error(e) => log.line(&format!("error: {e}")),
                }
            }
            next = Instant::now() + poll;
        }
        std::thread::sleep(Duration::from_millis(20).min(poll));
    }
    log.line("stopping");
    if let Err(e) = core.shutdown(&mut api, now()) {
        log.line(&format!("deregister failed: {e}"));
    }
    Ok(())
}
