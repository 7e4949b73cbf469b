//! Discrete-time co-simulation: the real manager runs against the fake
//! servers through in-process transports while [`SimClock`] owns virtual
//! time. Time only advances when the manager sleeps, so every run is a pure
//! function of the scenario and seed.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use runner_manager::clock::{rfc3339, Clock, Shutdown};
use runner_manager::config::{load_config, Config};
use runner_manager::http::{HttpRequest, HttpResponse, TlsRoots, Transport, TransportError};
use runner_manager::kube::KubeCredentials;
use runner_manager::labels::LabelSet;
use runner_manager::reconciler::{ReconcileRecord, LAST_ACTIVE_ANNOTATION};
use runner_manager::secret::SecretToken;
use runner_manager::service::{build_manager, run_loop, Runtime, ServiceExit};
use serde::Serialize;
use serde_json::{json, Value};

use crate::fake_github::{FakeGithub, FakeGithubConfig, FakeJob};
use crate::fake_kube::{FakeKube, FakeKubeConfig};
use crate::fake_runner::{RunnerCore, RunnerEvent};
use crate::scenario::{to_datetime, to_sim, EventKind, Scenario, ScenarioError, ScenarioEvent, SimTime};
use crate::trace::{Actor, Trace};
use crate::wire::{RequestLogEntry, WireReport};

pub const GITHUB_BASE: &str = "http://github.sim";
pub const KUBE_BASE: &str = "http://kube.sim";

/// Everything about a run that is not in the scenario itself.
#[derive(Clone, Debug, Default)]
pub struct SimConfig {
    pub seed: u64,
    pub github: FakeGithubConfig,
    pub kube: FakeKubeConfig,
    /// Extra manager flags, e.g. `["--poll-interval", "30s"]`.
    pub manager_args: Vec<String>,
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn with_requests_logged(mut self) -> Self {
        self.github.log_requests = true;
        self.kube.log_requests = true;
        self
    }

    /// The manager configuration, built through the same loader as the
    /// binary.
    pub fn manager_config(&self) -> Result<Config, runner_manager::config::ConfigError> {
        let mut args: Vec<String> = [
            "--owner",
            &self.github.owner,
            "--repo",
            &self.github.repo,
            "--namespace",
            &self.kube.namespace,
            "--deployment",
            &self.kube.deployment,
            "--github-api",
            GITHUB_BASE,
            "--kube-api",
            KUBE_BASE,
            "--status-addr",
            "disabled",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        args.extend(self.manager_args.iter().cloned());
        let env = HashMap::from([("GITHUB_TOKEN".to_string(), self.github.pat.clone())]);
        load_config(&args, &env)
    }
}

/// A scale write as the fake cluster saw it, with the ground truth at that
/// instant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimScaleWrite {
    pub at: SimTime,
    pub from: u32,
    pub to: u32,
    /// Matching jobs in an outstanding status according to fake GitHub.
    pub outstanding: usize,
}

struct SimRunner {
    pod: String,
    started_at: SimTime,
    core: RunnerCore,
}

/// Shared state of one scenario. All actors mutate it under one lock.
pub struct World {
    pub github: FakeGithub,
    pub kube: FakeKube,
    runners: Vec<SimRunner>,
    events: VecDeque<ScenarioEvent>,
    restarts: VecDeque<SimTime>,
    processed: SimTime,
    horizon: SimTime,
    finished: bool,
    runner_tick: SimTime,
    runner_labels: LabelSet,
    registration_token: String,
    truth_statuses: BTreeSet<String>,
    truth_labels: LabelSet,
    trace: Trace,
    records: Vec<ReconcileRecord>,
    scale_writes: Vec<SimScaleWrite>,
}

impl World {
    fn new(scenario: &Scenario, sim: &SimConfig, config: &Config) -> Self {
        let initial = scenario.initial_last_active();
        let mut annotations = std::collections::BTreeMap::new();
        if let Some(at) = initial {
            annotations.insert(LAST_ACTIVE_ANNOTATION.to_string(), rfc3339(to_datetime(at)));
        }
        let kube_cfg =
            FakeKubeConfig { pod_startup_secs: scenario.pod_startup_secs, seed: sim.seed, ..sim.kube.clone() };
        let runner_labels = match &scenario.runner_labels {
            Some(labels) => LabelSet::new(labels),
            None => config.policy.runner_labels.clone(),
        };
        Self {
            github: FakeGithub::new(sim.github.clone(), initial.unwrap_or(0)),
            kube: FakeKube::new(kube_cfg, annotations),
            runners: Vec::new(),
            events: scenario.events.iter().cloned().collect(),
            restarts: scenario.restart_times().into(),
            processed: -1,
            horizon: scenario.horizon,
            finished: false,
            runner_tick: scenario.runner_tick_secs as SimTime,
            runner_labels,
            registration_token: sim.github.registration_token.clone(),
            truth_statuses: config.policy.outstanding_statuses.clone(),
            truth_labels: config.policy.runner_labels.clone(),
            trace: Trace::new(),
            records: Vec::new(),
            scale_writes: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.processed.max(0)
    }

    fn next_runner_tick(&self, after: SimTime) -> Option<SimTime> {
        self.runners
            .iter()
            .map(|r| {
                let since = (after - r.started_at).max(0);
                r.started_at + (since + self.runner_tick - 1) / self.runner_tick * self.runner_tick
            })
            .min()
    }

    /// Earliest second after `processed` at which anything happens.
    fn next_activity(&self) -> Option<SimTime> {
        let from = self.processed + 1;
        [
            self.events.front().map(|e| e.at),
            self.github.next_completion(),
            self.kube.next_pod_start(),
            self.next_runner_tick(from),
        ]
        .into_iter()
        .flatten()
        .map(|t| t.max(from))
        .min()
    }

    /// Processes every second in `(processed, t]`.
    pub fn advance_to(&mut self, t: SimTime) {
        while let Some(s) = self.next_activity().filter(|s| *s <= t) {
            self.step(s);
            self.processed = s;
        }
        self.processed = self.processed.max(t);
    }

    fn step(&mut self, s: SimTime) {
        while self.events.front().is_some_and(|e| e.at <= s) {
            let ev = self.events.pop_front().expect("checked front");
            self.apply_event(&ev, s);
        }
        self.github.settle(s);
        self.kube.advance(s);
        for pod in self.kube.take_started() {
            self.runners.push(SimRunner {
                core: RunnerCore::new(pod.clone(), self.runner_labels.clone(), self.registration_token.clone()),
                pod,
                started_at: s,
            });
        }
        for i in 0..self.runners.len() {
            if (s - self.runners[i].started_at) % self.runner_tick != 0 {
                continue;
            }
            let events = self.runners[i].core.tick(&mut self.github, s);
            let pod = self.runners[i].pod.clone();
            for event in events {
                self.trace_runner(s, &pod, event);
            }
        }
        self.flush_outboxes();
    }

    fn apply_event(&mut self, ev: &ScenarioEvent, s: SimTime) {
        let detail = serde_json::to_value(&ev.kind).unwrap_or(Value::Null);
        let action = detail["kind"].as_str().unwrap_or("event").to_string();
        self.trace.push(s, Actor::Scenario, &action, detail);
        match &ev.kind {
            EventKind::EnqueueJob { id, labels, duration_secs, run_with } => {
                let id = id.expect("normalized scenarios carry job ids");
                self.github.enqueue_job(id, labels.clone(), *duration_secs, *run_with, s);
            }
            EventKind::CompleteJob { job } => self.github.complete_job(*job, s),
            EventKind::GithubFault { status } => self.github.set_fault(Some(*status), s),
            EventKind::GithubRecover => self.github.set_fault(None, s),
            EventKind::KubeFault { status } => self.kube.set_fault(Some(*status), s),
            EventKind::KubeRecover => self.kube.set_fault(None, s),
            EventKind::RateLimit { status, retry_after_secs, duration_secs } => {
                self.github.add_rate_limit(*status, *retry_after_secs, *duration_secs, s)
            }
            EventKind::RestartManager => {}
        }
    }

    fn trace_runner(&mut self, s: SimTime, pod: &str, event: RunnerEvent) {
        let (action, detail) = match event {
            RunnerEvent::Registered { id } => ("registered", json!({"pod": pod, "runner": id})),
            RunnerEvent::Claimed(a) => ("claimed", json!({"pod": pod, "job": a.job_id})),
            RunnerEvent::Finished { job_id, status } => {
                ("finished", json!({"pod": pod, "job": job_id, "status": status}))
            }
            RunnerEvent::Error(e) => ("error", json!({"pod": pod, "error": e})),
        };
        self.trace.push(s, Actor::FakeRunner, action, detail);
    }

    fn flush_outboxes(&mut self) {
        let mut entries = self.github.drain_outbox();
        entries.extend(self.kube.drain_outbox());
        entries.sort_by_key(|e| e.0);
        for (t, actor, action, detail) in entries {
            self.trace.push(t, actor, &action, detail);
        }
    }

    fn github_request(&mut self, req: &HttpRequest) -> HttpResponse {
        let now = self.now();
        let resp = self.github.handle(req, now);
        self.flush_outboxes();
        resp
    }

    fn kube_request(&mut self, req: &HttpRequest) -> HttpResponse {
        let now = self.now();
        let writes_before = self.kube.scale_writes().len();
        let resp = self.kube.handle(req, now);
        for w in &self.kube.scale_writes()[writes_before..] {
            self.scale_writes.push(SimScaleWrite {
                at: w.at,
                from: w.from,
                to: w.to,
                outstanding: self.github.outstanding_matching(&self.truth_statuses, &self.truth_labels),
            });
        }
        for pod in self.kube.take_stopped() {
            if let Some(i) = self.runners.iter().position(|r| r.pod == pod) {
                let mut runner = self.runners.remove(i);
                if let Err(e) = runner.core.shutdown(&mut self.github, now) {
                    self.trace_runner(now, &pod, RunnerEvent::Error(e));
                } else {
                    self.trace.push(now, Actor::FakeRunner, "exited", json!({"pod": pod, "code": 0}));
                }
            }
        }
        self.flush_outboxes();
        resp
    }

    fn record(&mut self, record: &ReconcileRecord) {
        let t = to_sim(record.time);
        self.trace.push(t, Actor::Manager, "reconcile", serde_json::to_value(record).unwrap_or(Value::Null));
        self.records.push(record.clone());
    }
}

type SharedWorld = Arc<Mutex<World>>;

fn lock(world: &SharedWorld) -> MutexGuard<'_, World> {
    world.lock().unwrap_or_else(|p| p.into_inner())
}

/// Virtual clock over the shared world. Sleeping advances the world; a
/// pending manager restart or the scenario horizon cuts the sleep short.
pub struct SimClock {
    world: SharedWorld,
    shutdown: Shutdown,
}

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        to_datetime(lock(&self.world).now())
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) -> bool {
        if self.shutdown.is_requested() {
            return false;
        }
        let mut t = to_sim(deadline);
        if to_datetime(t) < deadline {
            t += 1;
        }
        let mut w = lock(&self.world);
        if let Some(r) = w.restarts.front().copied().filter(|r| *r <= t) {
            w.advance_to(r);
            self.shutdown.request();
            return false;
        }
        if t > w.horizon {
            let h = w.horizon;
            w.advance_to(h);
            w.finished = true;
            self.shutdown.request();
            return false;
        }
        w.advance_to(t);
        true
    }
}

struct GithubTransport(SharedWorld);

impl Transport for GithubTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Ok(lock(&self.0).github_request(request))
    }
}

struct KubeTransport(SharedWorld);

impl Transport for KubeTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Ok(lock(&self.0).kube_request(request))
    }
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub name: String,
    pub horizon: SimTime,
    pub config: Config,
    pub trace: Trace,
    pub records: Vec<ReconcileRecord>,
    pub scale_writes: Vec<SimScaleWrite>,
    /// Requests the fake cluster refused for leaving the namespace.
    pub namespace_violations: Vec<String>,
    pub github_wire: WireReport,
    pub kube_wire: WireReport,
    /// Longest time any runner credential went without contacting GitHub.
    pub max_credential_age: SimTime,
    pub restarts: Vec<SimTime>,
    /// How each manager instance ended, in order.
    pub exits: Vec<ServiceExit>,
    pub jobs: Vec<FakeJob>,
    pub final_replicas: u32,
    pub github_requests: Vec<RequestLogEntry>,
    pub kube_requests: Vec<RequestLogEntry>,
}

impl ScenarioRun {
    /// The scenario failed if it tripped the namespace guard or a manager
    /// instance stopped for any reason other than a restart or the horizon.
    pub fn failed(&self) -> bool {
        !self.namespace_violations.is_empty() || self.exits.iter().any(|e| *e != ServiceExit::Terminated)
    }

    /// `(tick, decision)` for every completed reconcile, in order.
    pub fn decisions(&self) -> Vec<(SimTime, Option<runner_manager::reconciler::Decision>)> {
        self.records.iter().map(|r| (to_sim(r.tick), r.decision())).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("manager configuration: {0}")]
    Config(#[from] runner_manager::config::ConfigError),
}

/// Runs the real manager against the fakes until the scenario horizon,
/// relaunching it at every `restart_manager` event.
pub fn run_scenario(scenario: &Scenario, sim: &SimConfig) -> Result<ScenarioRun, SimError> {
    let scenario = scenario.normalized()?;
    let config = sim.manager_config()?;
    let world: SharedWorld = Arc::new(Mutex::new(World::new(&scenario, sim, &config)));
    lock(&world).advance_to(0);

    let mut restarts = Vec::new();
    let mut exits = Vec::new();
    loop {
        let shutdown = Shutdown::new();
        let clock = Arc::new(SimClock { world: Arc::clone(&world), shutdown: shutdown.clone() });
        let sink_world = Arc::clone(&world);
        let runtime = Runtime {
            github_transport: Arc::new(GithubTransport(Arc::clone(&world))),
            kube_transport: Arc::new(KubeTransport(Arc::clone(&world))),
            kube_credentials: KubeCredentials {
                api_base: KUBE_BASE.into(),
                bearer_token: SecretToken::new(sim.kube.service_account_token.clone()),
                tls_roots: TlsRoots::WebPki,
                namespace: sim.kube.namespace.clone(),
            },
            clock: clock.clone(),
            shutdown: shutdown.clone(),
            sink: Box::new(move |r: &ReconcileRecord| lock(&sink_world).record(r)),
        };
        let mut manager = build_manager(&config, runtime);
        let exit = run_loop(&mut manager, clock.as_ref(), &shutdown, None);
        let stop = exit != ServiceExit::Terminated;
        exits.push(exit);
        let mut w = lock(&world);
        if stop || w.finished {
            break;
        }
        let now = w.now();
        while w.restarts.front().is_some_and(|r| *r <= now) {
            w.restarts.pop_front();
            restarts.push(now);
            w.trace.push(now, Actor::Scenario, "restart_manager_applied", json!({"instance": restarts.len() + 1}));
        }
    }

    let w = Arc::try_unwrap(world)
        .map_err(|_| ())
        .expect("all manager handles dropped")
        .into_inner()
        .unwrap_or_else(|p| p.into_inner());
    Ok(ScenarioRun {
        name: scenario.name.clone().unwrap_or_else(|| "scenario".into()),
        horizon: scenario.horizon,
        max_credential_age: w.github.max_credential_age(w.now()),
        final_replicas: w.kube.spec_replicas(&sim.kube.deployment).unwrap_or(0),
        namespace_violations: w.kube.namespace_violations().to_vec(),
        github_wire: w.github.wire().clone(),
        kube_wire: w.kube.wire().clone(),
        jobs: w.github.jobs().cloned().collect(),
        github_requests: w.github.request_log().to_vec(),
        kube_requests: w.kube.request_log().to_vec(),
        config,
        trace: w.trace,
        records: w.records,
        scale_writes: w.scale_writes,
        restarts,
        exits,
    })
}
