//! Scenario scripts: timed events applied to the fake world.
//!
//! Simulated time is whole seconds since [`epoch`]. Scripts are YAML or
//! JSON, either a bare event list or a full [`Scenario`] object.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub type SimTime = i64;

pub const HOUR: SimTime = 3600;
pub const DAY: SimTime = 24 * HOUR;

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn to_datetime(t: SimTime) -> DateTime<Utc> {
    epoch() + chrono::TimeDelta::seconds(t)
}

pub fn to_sim(t: DateTime<Utc>) -> SimTime {
    (t - epoch()).num_seconds()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    EnqueueJob {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        #[serde(default = "default_job_labels")]
        labels: Vec<String>,
        /// Run time once claimed; absent means it runs until `complete_job`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_secs: Option<u64>,
        /// Put the job into the run of this earlier job instead of a new run.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        run_with: Option<u64>,
    },
    CompleteJob {
        job: u64,
    },
    GithubFault {
        #[serde(default = "default_fault_status")]
        status: u16,
    },
    GithubRecover,
    KubeFault {
        #[serde(default = "default_fault_status")]
        status: u16,
    },
    KubeRecover,
    RestartManager,
    RateLimit {
        #[serde(default = "default_rate_limit_status")]
        status: u16,
        retry_after_secs: u64,
        duration_secs: u64,
    },
}

fn default_job_labels() -> Vec<String> {
    vec!["self-hosted".into(), "linux-gpu-cuda".into()]
}

fn default_fault_status() -> u16 {
    500
}

fn default_rate_limit_status() -> u16 {
    429
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    #[serde(deserialize_with = "de_sim_time")]
    pub at: SimTime,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl ScenarioEvent {
    pub fn new(at: SimTime, kind: EventKind) -> Self {
        Self { at, kind }
    }
}

/// Accepts seconds, a humantime duration ("2d 3h") or an RFC 3339 instant.
fn de_sim_time<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(n) => Ok(n),
        Raw::Text(s) => parse_sim_time(&s).map_err(serde::de::Error::custom),
    }
}

pub fn parse_sim_time(s: &str) -> Result<SimTime, String> {
    let s = s.trim();
    if let Ok(n) = s.parse::<i64>() {
        return Ok(n);
    }
    if let Some(t) = runner_manager::clock::parse_rfc3339(s) {
        return Ok(to_sim(t));
    }
    humantime::parse_duration(s)
        .map(|d| d.as_secs() as SimTime)
        .map_err(|e| format!("{s:?} is neither seconds, a duration nor an RFC 3339 time: {e}"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Last instant at which a manager tick may run.
    #[serde(deserialize_with = "de_sim_time")]
    pub horizon: SimTime,
    #[serde(default = "default_pod_startup")]
    pub pod_startup_secs: u64,
    #[serde(default = "default_runner_tick")]
    pub runner_tick_secs: u64,
    /// Runner idle time already elapsed at t=0, stored as the last-active
    /// annotation. Absent means the Deployment carries no annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_idle_secs: Option<u64>,
    /// Labels the fake runner advertises; defaults to the manager's labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_labels: Option<Vec<String>>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

fn default_pod_startup() -> u64 {
    20
}

fn default_runner_tick() -> u64 {
    10
}

impl Scenario {
    pub fn new(horizon: SimTime, events: Vec<ScenarioEvent>) -> Self {
        Self {
            name: None,
            horizon,
            pod_startup_secs: default_pod_startup(),
            runner_tick_secs: default_runner_tick(),
            initial_idle_secs: None,
            runner_labels: None,
            events,
        }
    }

    pub fn with_initial_idle(mut self, secs: u64) -> Self {
        self.initial_idle_secs = Some(secs);
        self
    }

    /// Time of the last-active annotation present at t=0.
    pub fn initial_last_active(&self) -> Option<SimTime> {
        self.initial_idle_secs.map(|s| -(s as SimTime))
    }

    pub fn restart_times(&self) -> Vec<SimTime> {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::RestartManager)).map(|e| e.at).collect()
    }

    /// Validates ordering and references and assigns missing job ids
    /// (one more than the largest id so far).
    pub fn normalized(&self) -> Result<Scenario, ScenarioError> {
        let err = |i: usize, m: String| Err(ScenarioError::Invalid { index: i, message: m });
        if self.horizon < 0 {
            return err(0, "horizon must not be negative".into());
        }
        if self.pod_startup_secs == 0 || self.runner_tick_secs == 0 {
            return err(0, "pod_startup_secs and runner_tick_secs must be positive".into());
        }
        let mut out = self.clone();
        let mut ids = BTreeSet::new();
        let mut next_id = 1u64;
        let mut prev_at = SimTime::MIN;
        for (i, ev) in out.events.iter_mut().enumerate() {
            if ev.at < 0 {
                return err(i, format!("event time {} is negative", ev.at));
            }
            if ev.at < prev_at {
                return err(i, format!("events out of order: {} after {}", ev.at, prev_at));
            }
            prev_at = ev.at;
            match &mut ev.kind {
                EventKind::EnqueueJob { id, duration_secs, run_with, labels } => {
                    let assigned = id.unwrap_or(next_id);
                    if !ids.insert(assigned) {
                        return err(i, format!("duplicate job id {assigned}"));
                    }
                    *id = Some(assigned);
                    next_id = next_id.max(assigned + 1);
                    if *duration_secs == Some(0) {
                        return err(i, "job duration must be at least one second".into());
                    }
                    if let Some(other) = run_with {
                        if *other == assigned || !ids.contains(other) {
                            return err(i, format!("run_with refers to unknown earlier job {other}"));
                        }
                    }
                    if labels.iter().all(|l| l.trim().is_empty()) {
                        return err(i, "job must request at least one label".into());
                    }
                }
                EventKind::CompleteJob { job } => {
                    if !ids.contains(job) {
                        return err(i, format!("complete_job refers to unknown earlier job {job}"));
                    }
                }
                EventKind::GithubFault { status } | EventKind::KubeFault { status } => {
                    if !(400..=599).contains(status) {
                        return err(i, format!("fault status {status} is not an HTTP error"));
                    }
                }
                EventKind::RateLimit { status, duration_secs, .. } => {
                    if *status != 429 && *status != 403 {
                        return err(i, format!("rate limit status must be 429 or 403, got {status}"));
                    }
                    if *duration_secs == 0 {
                        return err(i, "rate limit duration must be positive".into());
                    }
                }
                EventKind::GithubRecover | EventKind::KubeRecover | EventKind::RestartManager => {}
            }
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            Full(Scenario),
            List(Vec<ScenarioEvent>),
        }
        let parsed: File = serde_yaml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let scenario = match parsed {
            File::Full(s) => s,
            File::List(events) => {
                let last = events.iter().map(|e| e.at).max().unwrap_or(0);
                Scenario::new(last + HOUR, events)
            }
        };
        scenario.normalized()
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Scenario::parse(&text)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario event #{index}: {message}")]
    Invalid { index: usize, message: String },
}

/// Thirty-odd days of nothing: only keepalive activity should appear.
pub fn zero_load_scenario(days: i64) -> Scenario {
    let mut s = Scenario::new(days * DAY, vec![]);
    s.name = Some(format!("zero-load-{days}d"));
    s
}

const STRAY_LABELS: &[&str] = &["windows", "macos", "arm64", "ubuntu-latest", "linux-tpu"];
const FAULT_STATUSES: &[u16] = &[500, 502, 503, 504];

fn job_labels(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut labels = vec!["self-hosted".to_string()];
    if rng.gen_bool(0.85) {
        labels.push("linux-gpu-cuda".into());
    }
    for extra in ["linux", "x64"] {
        if rng.gen_bool(0.3) {
            labels.push(extra.into());
        }
    }
    if rng.gen_bool(0.2) {
        labels.push(STRAY_LABELS.choose(rng).unwrap().to_string());
    }
    if rng.gen_bool(0.15) {
        let i = rng.gen_range(0..labels.len());
        labels[i] = labels[i].to_uppercase();
    }
    labels.shuffle(rng);
    labels
}

struct Builder {
    rng: ChaCha8Rng,
    horizon: SimTime,
    events: Vec<ScenarioEvent>,
    next_job: u64,
}

impl Builder {
    fn at(&mut self, lo: SimTime, hi: SimTime) -> SimTime {
        if hi <= lo {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }

    fn jobs(&mut self, total: usize, max_duration: u64) {
        let mut remaining = total;
        while remaining > 0 {
            let burst = self.rng.gen_range(1..=remaining.min(4));
            remaining -= burst;
            let start = self.at(0, self.horizon);
            let shared_run = self.rng.gen_bool(0.3);
            let mut first = None;
            for k in 0..burst {
                let id = self.next_job;
                self.next_job += 1;
                let at = start + self.rng.gen_range(0..=(k as SimTime * 5));
                let scripted_end = self.rng.gen_bool(0.25);
                let duration = (!scripted_end).then(|| self.rng.gen_range(30..=max_duration));
                let run_with = if shared_run { first } else { None };
                let labels = job_labels(&mut self.rng);
                self.events.push(ScenarioEvent::new(
                    at,
                    EventKind::EnqueueJob { id: Some(id), labels, duration_secs: duration, run_with },
                ));
                first.get_or_insert(id);
                if scripted_end {
                    let end = at + self.rng.gen_range(60..=3 * HOUR);
                    if end <= self.horizon {
                        self.events.push(ScenarioEvent::new(end, EventKind::CompleteJob { job: id }));
                    }
                }
            }
        }
    }

    fn github_faults(&mut self, count: usize) {
        for _ in 0..count {
            let start = self.at(0, self.horizon);
            let polls = self.rng.gen_range(1..=50);
            let len = polls * 60 + self.rng.gen_range(-30..30);
            let status = *FAULT_STATUSES.choose(&mut self.rng).unwrap();
            self.events.push(ScenarioEvent::new(start, EventKind::GithubFault { status }));
            self.events.push(ScenarioEvent::new(start + len.max(1), EventKind::GithubRecover));
        }
    }

    fn rate_limits(&mut self, count: usize) {
        for _ in 0..count {
            let start = self.at(0, self.horizon);
            let status = if self.rng.gen_bool(0.5) { 429 } else { 403 };
            let retry_after_secs = if self.rng.gen_bool(0.2) { 0 } else { self.rng.gen_range(1..=300) };
            let duration_secs = self.rng.gen_range(60..=1800);
            self.events
                .push(ScenarioEvent::new(start, EventKind::RateLimit { status, retry_after_secs, duration_secs }));
        }
    }

    fn kube_faults(&mut self, count: usize) {
        for _ in 0..count {
            let start = self.at(0, self.horizon);
            let len = self.rng.gen_range(1..=20) * 60 + self.rng.gen_range(-30..30);
            let status = if self.rng.gen_bool(0.5) { 500 } else { 503 };
            self.events.push(ScenarioEvent::new(start, EventKind::KubeFault { status }));
            self.events.push(ScenarioEvent::new(start + len.max(1), EventKind::KubeRecover));
        }
    }

    fn restarts(&mut self, count: usize) {
        for _ in 0..count {
            let at = self.at(0, self.horizon);
            self.events.push(ScenarioEvent::new(at, EventKind::RestartManager));
        }
    }

    fn finish(mut self, name: String, initial_idle: Option<u64>) -> Scenario {
        self.events.sort_by_key(|e| e.at);
        let mut s = Scenario::new(self.horizon, self.events);
        s.name = Some(name);
        s.initial_idle_secs = initial_idle;
        s.normalized().expect("generated scenarios are valid")
    }
}

fn builder(seed: u64, horizon: SimTime) -> Builder {
    Builder { rng: ChaCha8Rng::seed_from_u64(seed), horizon, events: Vec::new(), next_job: 1 }
}

fn initial_idle(rng: &mut ChaCha8Rng, max: SimTime) -> Option<u64> {
    match rng.gen_range(0..4) {
        0 => None,
        1 => Some(rng.gen_range(0..=HOUR) as u64),
        _ => Some(rng.gen_range(0..=max) as u64),
    }
}

/// 2 to 12 hours of bursty load (at most ten jobs), GitHub outages of up to
/// fifty polls, rate limits, Kubernetes outages and occasionally a restart.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let horizon = rng.gen_range(2 * HOUR..=12 * HOUR);
    let idle = initial_idle(&mut rng, 90 * HOUR);
    let mut b = builder(seed, horizon);
    let jobs = b.rng.gen_range(0..=10);
    b.jobs(jobs, 2 * HOUR as u64);
    let n = b.rng.gen_range(0..=3);
    b.github_faults(n);
    let n = b.rng.gen_range(0..=2);
    b.rate_limits(n);
    let n = b.rng.gen_range(0..=2);
    b.kube_faults(n);
    if b.rng.gen_bool(0.2) {
        b.restarts(1);
    }
    b.finish(format!("random-{seed}"), idle)
}

/// Thirty days with light load, short outages and several manager restarts.
pub fn restart_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let horizon = 30 * DAY;
    let idle = match rng.gen_range(0..3) {
        0 => None,
        _ => Some(rng.gen_range(0..=84 * HOUR) as u64),
    };
    let mut b = builder(seed.wrapping_add(1 << 32), horizon);
    let jobs = b.rng.gen_range(0..=10);
    b.jobs(jobs, 2 * HOUR as u64);
    let n = b.rng.gen_range(0..=3);
    b.github_faults(n);
    let n = b.rng.gen_range(0..=1);
    b.rate_limits(n);
    let n = b.rng.gen_range(0..=1);
    b.kube_faults(n);
    let n = b.rng.gen_range(1..=8);
    b.restarts(n);
    b.finish(format!("restart-{seed}"), idle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_yaml_list() {
        let s = Scenario::parse(
            "- {at: 10, kind: enqueue_job, duration_secs: 300}\n- {at: 2m, kind: github_fault, status: 503}\n- {at: 300, kind: github_recover}\n",
        )
        .unwrap();
        assert_eq!(s.horizon, 300 + HOUR);
        assert_eq!(
            s.events[0].kind,
            EventKind::EnqueueJob {
                id: Some(1),
                labels: default_job_labels(),
                duration_secs: Some(300),
                run_with: None,
            }
        );
        assert_eq!(s.events[1].at, 120);
    }

    #[test]
    fn parses_json_object() {
        let s = Scenario::parse(
            r#"{"horizon": "2d", "initial_idle_secs": 60, "events": [
                {"at": "2024-01-02T00:00:00Z", "kind": "restart_manager"},
                {"at": 90000, "kind": "rate_limit", "retry_after_secs": 30, "duration_secs": 600}
            ]}"#,
        )
        .unwrap();
        assert_eq!(s.horizon, 2 * DAY);
        assert_eq!(s.restart_times(), vec![DAY]);
        assert_eq!(s.initial_last_active(), Some(-60));
    }

    #[test]
    fn rejects_bad_scripts() {
        assert!(Scenario::parse("- {at: 20, kind: github_recover}\n- {at: 10, kind: github_recover}").is_err());
        assert!(Scenario::parse("- {at: 20, kind: complete_job, job: 4}").is_err());
        assert!(Scenario::parse("- {at: 1, kind: enqueue_job, duration_secs: 0}").is_err());
        assert!(
            Scenario::parse("- {at: 1, kind: rate_limit, status: 500, retry_after_secs: 1, duration_secs: 1}").is_err()
        );
    }

    #[test]
    fn round_trips_through_json() {
        let s = random_scenario(7);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::parse(&text).unwrap(), s);
    }

    #[test]
    fn generators_are_deterministic_and_valid() {
        for seed in 0..50 {
            let a = random_scenario(seed);
            assert_eq!(a, random_scenario(seed));
            assert!((2 * HOUR..=12 * HOUR).contains(&a.horizon));
            let jobs = a.events.iter().filter(|e| matches!(e.kind, EventKind::EnqueueJob { .. })).count();
            assert!(jobs <= 10);
            let r = restart_scenario(seed);
            assert!(!r.restart_times().is_empty());
        }
        assert_ne!(random_scenario(1), random_scenario(2));
    }
}
