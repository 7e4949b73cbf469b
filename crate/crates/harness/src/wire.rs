//! Request bookkeeping shared by the fake servers.

use runner_manager::http::HttpRequest;
use serde::Serialize;
use serde_json::Value;

use crate::scenario::SimTime;
use crate::trace::Actor;

/// Keeps at most this many example messages per report.
const MAX_EXAMPLES: usize = 20;

/// Counts requests checked for protocol conformance and the ones that failed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WireReport {
    pub requests: u64,
    pub violation_count: u64,
    pub violations: Vec<String>,
}

impl WireReport {
    pub fn violation(&mut self, message: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_EXAMPLES {
            self.violations.push(message);
        }
    }

    pub fn is_clean(&self) -> bool {
        self.violation_count == 0
    }

    pub fn merge(&mut self, other: &WireReport) {
        self.requests += other.requests;
        self.violation_count += other.violation_count;
        for v in &other.violations {
            if self.violations.len() < MAX_EXAMPLES {
                self.violations.push(v.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RequestLogEntry {
    pub at: SimTime,
    pub actor: Actor,
    pub method: String,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub status: u16,
}

impl RequestLogEntry {
    pub fn new(at: SimTime, actor: Actor, req: &HttpRequest, status: u16) -> Self {
        Self {
            at,
            actor,
            method: req.method.as_str().to_string(),
            path: req.path().to_string(),
            query: req.query_pairs(),
            headers: req.headers.clone(),
            body: String::from_utf8_lossy(&req.body).into_owned(),
            status,
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Identifies the caller from its User-Agent.
pub fn actor_of(req: &HttpRequest) -> Actor {
    match req.header("user-agent") {
        Some(ua) if ua.starts_with("runner-manager/") => Actor::Manager,
        Some(ua) if ua.starts_with("fake-runner/") => Actor::FakeRunner,
        _ => Actor::Scenario,
    }
}

/// Trace entries a fake produced, waiting to be merged into the scenario
/// trace.
#[derive(Debug, Default)]
pub struct Outbox(Vec<(SimTime, Actor, String, Value)>);

impl Outbox {
    pub fn push(&mut self, t: SimTime, actor: Actor, action: &str, detail: Value) {
        self.0.push((t, actor, action.to_string(), detail));
    }

    pub fn drain(&mut self) -> Vec<(SimTime, Actor, String, Value)> {
        std::mem::take(&mut self.0)
    }
}
