//! Acceptance suite. Prints one PASS/FAIL line per criterion to stderr and
//! fails if any criterion fails. Runs sequentially; every scenario run is
//! reduced to counters before the next one starts.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runner_harness::checks;
use runner_harness::fake_github::{FakeGithub, FakeGithubConfig, JobStatus};
use runner_harness::fake_kube::{collection_path, FakeKube, FakeKubeConfig};
use runner_harness::fake_runner::{job_workspace, POLL_MS_ENV};
use runner_harness::oracle::oracle_decisions;
use runner_harness::scenario::{
    random_scenario, restart_scenario, zero_load_scenario, EventKind, Scenario, ScenarioEvent, SimTime,
};
use runner_harness::serve::{serve_http, shared};
use runner_harness::sim::{run_scenario, ScenarioRun, SimConfig};
use runner_manager::bootstrap::{
    emit_manifests, init_runner_dir, run_runner, ConfigureMode, InitStatus, ManifestInput, RunnerProfile,
    FAKE_RUNNER_ENV, MARKER_FILE, RUNNER_CONFIG_FILE,
};
use runner_manager::clock::{Clock, ManualClock, Shutdown};
use runner_manager::github::GithubClient;
use runner_manager::http::{HttpRequest, Method, TlsRoots, UreqTransport};
use runner_manager::policy::Policy;
use runner_manager::repo::RepoCoordinates;
use runner_manager::secret::SecretToken;
use serde::Deserialize;

const RANDOM_SCRIPTS: u64 = 1000;
const RESTART_SCRIPTS: u64 = 100;
const FAULT_SCRIPTS: u64 = 60;
const ZERO_LOAD_DAYS: i64 = 30;
/// Longest GitHub outage injected by the fault suite, in polls.
const FAULT_POLLS: i64 = 50;
/// Wall-clock limit for each real-process wait in the bootstrap check.
const PROCESS_WAIT: Duration = Duration::from_secs(30);
/// Violations kept per criterion for the report.
const SHOWN: usize = 5;

#[derive(Default)]
struct Tally {
    checked: usize,
    violations: usize,
    examples: Vec<String>,
}

impl Tally {
    fn add(&mut self, v: impl IntoIterator<Item = String>) {
        self.checked += 1;
        for m in v {
            self.violations += 1;
            if self.examples.len() < SHOWN {
                self.examples.push(m);
            }
        }
    }

    fn fail(&mut self, m: String) {
        self.add([m]);
    }

    fn merge(&mut self, other: &Tally) {
        self.checked += other.checked;
        self.violations += other.violations;
        let room = SHOWN.saturating_sub(self.examples.len());
        self.examples.extend(other.examples.iter().take(room).cloned());
    }

    fn passed(&self) -> bool {
        self.checked > 0 && self.violations == 0
    }
}

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, ok: bool, detail: String, examples: &[String]) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        let mut text = format!("{verdict} {id} {title}: {detail}");
        for e in examples {
            text.push_str(&format!("\n       {e}"));
        }
        let _ = writeln!(std::io::stderr(), "{text}");
        self.lines.push((id.to_string(), ok));
    }

    fn tally(&mut self, id: &str, title: &str, t: &Tally, detail: String) {
        self.line(
            id,
            title,
            t.passed(),
            format!("{detail}, {} checked, {} violations", t.checked, t.violations),
            &t.examples,
        );
    }
}

/// Criterion counters shared by every simulated suite.
#[derive(Default)]
struct Suite {
    cap: Tally,
    oracle: Tally,
    latency: Tally,
    latency_samples: usize,
    latency_max: SimTime,
    premature: Tally,
    namespace: Tally,
    wire: Tally,
    wire_requests: u64,
    trace: Tally,
    keepalive: Tally,
    windows: Tally,
    min_window: Option<usize>,
    max_drift: SimTime,
    max_drift_idle: SimTime,
    max_spec: u32,
    scale_writes: usize,
}

fn check_run(s: &mut Suite, scenario: &Scenario, run: &ScenarioRun, policy: &Policy) {
    let mut cap = checks::check_cap(run, policy.max_runners);
    if run.failed() {
        cap.push(format!("{}: manager exited early: {:?}", run.name, run.exits));
    }
    s.cap.add(cap);
    s.max_spec = s.max_spec.max(run.scale_writes.iter().map(|w| w.to).max().unwrap_or(0));
    s.scale_writes += run.scale_writes.len();
    match oracle_decisions(scenario, policy) {
        Ok(expected) => s.oracle.add(checks::check_oracle(run, &expected)),
        Err(e) => s.oracle.fail(format!("{}: oracle rejected the script: {e}", run.name)),
    }
    let p = policy.poll_interval.as_secs() as SimTime;
    let latency = checks::check_demand_latency(scenario, run, policy, 2 * p);
    s.latency_samples += latency.samples;
    s.latency_max = s.latency_max.max(latency.max_latency);
    s.latency.add(latency.violations);
    s.premature.add(checks::check_no_premature_scale_down(scenario, run));
    s.namespace.add(checks::check_namespace(run));
    s.wire_requests += run.github_wire.requests + run.kube_wire.requests;
    s.wire.add(checks::check_wire(run));
    s.trace.add(checks::check_trace(run));
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Keepalive {
    Skip,
    /// Dwell, token age and drift.
    Schedule,
    /// Also the two-per-week window count, which holds only without load.
    Windows,
}

fn simulate(s: &mut Suite, scenario: &Scenario, seed: u64, keepalive: Keepalive) {
    let run = match run_scenario(scenario, &SimConfig::with_seed(seed)) {
        Ok(run) => run,
        Err(e) => {
            s.cap.fail(format!("{}: simulation failed: {e}", scenario.name.as_deref().unwrap_or("?")));
            return;
        }
    };
    let policy = run.config.policy.clone();
    check_run(s, scenario, &run, &policy);
    if keepalive != Keepalive::Skip {
        let k = checks::check_keepalive(scenario, &run, &policy);
        if keepalive == Keepalive::Schedule {
            s.max_drift = s.max_drift.max(k.max_drift);
        }
        s.keepalive.add(k.violations);
        if keepalive == Keepalive::Windows {
            s.max_drift_idle = s.max_drift_idle.max(k.max_drift);
            s.min_window = Some(s.min_window.map_or(k.min_window_count, |m| m.min(k.min_window_count)));
            s.windows.add(k.window_violations);
        }
    }
}

/// A long matching job with a GitHub outage of up to fifty polls laid over
/// it; sometimes the job finishes and a second one arrives mid-outage.
fn fault_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa_0175);
    let labels = || vec!["self-hosted".to_string(), "linux-gpu-cuda".to_string()];
    let mut events = vec![ScenarioEvent::new(
        100,
        EventKind::EnqueueJob {
            id: Some(1),
            labels: labels(),
            duration_secs: Some(rng.gen_range(600..=4000)),
            run_with: None,
        },
    )];
    let start = rng.gen_range(300..=1500);
    let polls = if seed.is_multiple_of(4) { FAULT_POLLS } else { rng.gen_range(1..=FAULT_POLLS) };
    let len = polls * 60;
    if seed % 3 == 2 {
        let status = if rng.gen_bool(0.5) { 429 } else { 403 };
        events.push(ScenarioEvent::new(
            start,
            EventKind::RateLimit { status, retry_after_secs: rng.gen_range(1..=300), duration_secs: len as u64 },
        ));
    } else {
        let status = [500, 502, 503, 504][rng.gen_range(0..4)];
        events.push(ScenarioEvent::new(start, EventKind::GithubFault { status }));
        events.push(ScenarioEvent::new(start + len, EventKind::GithubRecover));
    }
    if rng.gen_bool(0.5) {
        let at = start + rng.gen_range(0..len);
        events.push(ScenarioEvent::new(
            at,
            EventKind::EnqueueJob {
                id: Some(2),
                labels: labels(),
                duration_secs: Some(rng.gen_range(60..=900)),
                run_with: None,
            },
        ));
    }
    events.sort_by_key(|e| e.at);
    let mut s = Scenario::new(start + len + 3 * 3600, events);
    s.name = Some(format!("fault-{seed}"));
    s.initial_idle_secs = Some(rng.gen_range(0..=3600));
    s.normalized().expect("fault scripts are valid")
}

/// The zero-load trace of a restart script: same start state and restarts,
/// no jobs or faults.
fn restarts_only(scenario: &Scenario) -> Scenario {
    let mut s = scenario.clone();
    s.events.retain(|e| e.kind == EventKind::RestartManager);
    s.name = scenario.name.as_ref().map(|n| format!("{n}-zero-load"));
    s.normalized().expect("projection of a valid script")
}

fn sim_criteria(report: &mut Report) {
    let began = Instant::now();
    let mut random = Suite::default();
    for seed in 0..RANDOM_SCRIPTS {
        simulate(&mut random, &random_scenario(seed), seed, Keepalive::Skip);
    }
    let random_secs = began.elapsed().as_secs_f64();

    let began = Instant::now();
    let mut faults = Suite::default();
    for seed in 0..FAULT_SCRIPTS {
        simulate(&mut faults, &fault_scenario(seed), seed, Keepalive::Skip);
    }
    let fault_secs = began.elapsed().as_secs_f64();

    let began = Instant::now();
    let mut zero = Suite::default();
    let zero_scenario = zero_load_scenario(ZERO_LOAD_DAYS);
    let zero_run = run_scenario(&zero_scenario, &SimConfig::with_seed(0)).expect("zero-load run");
    let policy = zero_run.config.policy.clone();
    check_run(&mut zero, &zero_scenario, &zero_run, &policy);
    let zk = checks::check_keepalive(&zero_scenario, &zero_run, &policy);
    drop(zero_run);
    let zero_secs = began.elapsed().as_secs_f64();

    let began = Instant::now();
    let mut restart = Suite::default();
    let mut restart_count = 0;
    for seed in 0..RESTART_SCRIPTS {
        let scenario = restart_scenario(seed);
        restart_count += scenario.restart_times().len();
        simulate(&mut restart, &scenario, seed, Keepalive::Schedule);
        simulate(&mut restart, &restarts_only(&scenario), seed, Keepalive::Windows);
    }
    let restart_secs = began.elapsed().as_secs_f64();

    let p = policy.poll_interval.as_secs() as SimTime;
    let dwell = policy.min_dwell.as_secs() as SimTime;

    let r = &random;
    report.tally(
        "C1",
        "one-runner cap",
        &r.cap,
        format!(
            "{RANDOM_SCRIPTS} random scripts, max spec_replicas {}, {} scale writes, {random_secs:.1} s",
            r.max_spec, r.scale_writes
        ),
    );
    report.tally(
        "C2",
        "oracle equivalence",
        &r.oracle,
        format!("{RANDOM_SCRIPTS} random scripts, every poll tick compared"),
    );

    let mut latency = Tally::default();
    for s in [&random, &faults, &restart] {
        latency.merge(&s.latency);
    }
    let samples = random.latency_samples + faults.latency_samples + restart.latency_samples;
    let max = random.latency_max.max(faults.latency_max).max(restart.latency_max);
    report.line(
        "C3",
        "demand latency",
        latency.violations == 0 && samples > 0,
        format!("{samples} quiescent enqueues, max {max} s, bound {} s", 2 * p),
        &latency.examples,
    );

    let mut keepalive_ok = zk.violations.is_empty()
        && zk.window_violations.is_empty()
        && zk.min_window_count >= 2
        && zk.min_dwell >= dwell;
    keepalive_ok &= zk.max_token_age < checks::WEEK && zk.max_drift <= p && zk.activations > 0;
    let mut zero_extra = zk.violations.clone();
    zero_extra.extend(zk.window_violations.iter().cloned());
    zero_extra.extend(zero.cap.examples.iter().chain(&zero.oracle.examples).cloned());
    keepalive_ok &= zero.cap.passed() && zero.oracle.passed();
    zero_extra.truncate(SHOWN);
    report.line(
        "C4",
        "keepalive schedule",
        keepalive_ok,
        format!(
            "{ZERO_LOAD_DAYS}-day zero load: {} activations, min per 7-day window {}, min dwell {} s (need {dwell}), max token age {:.2} d, max drift {} s (allowed {p}), {zero_secs:.1} s",
            zk.activations,
            zk.min_window_count,
            zk.min_dwell,
            zk.max_token_age as f64 / 86400.0,
            zk.max_drift,
        ),
        &zero_extra,
    );

    let mut premature = Tally::default();
    for s in [&random, &faults, &zero, &restart] {
        premature.merge(&s.premature);
    }
    let mut fault_examples = faults.cap.examples.clone();
    fault_examples.extend(faults.oracle.examples.iter().cloned());
    fault_examples.truncate(SHOWN);
    premature.examples.extend(fault_examples.iter().cloned());
    let fault_ok = faults.cap.passed() && faults.oracle.passed();
    report.line(
        "C5",
        "no premature deprovision",
        premature.passed() && fault_ok,
        format!(
            "{} scripts incl. {FAULT_SCRIPTS} outage scripts of up to {FAULT_POLLS} polls ({fault_secs:.1} s), {} violations",
            premature.checked, premature.violations
        ),
        &premature.examples,
    );

    let mut namespace = Tally::default();
    let mut wire = Tally::default();
    let mut requests = 0;
    for s in [&random, &faults, &zero, &restart] {
        namespace.merge(&s.namespace);
        wire.merge(&s.wire);
        wire.merge(&s.trace);
        requests += s.wire_requests;
    }
    report.tally("C6", "unprivileged operation", &namespace, "out-of-namespace requests across all suites".into());

    let rs = &restart;
    let mut restart_examples: Vec<String> = rs
        .cap
        .examples
        .iter()
        .chain(&rs.oracle.examples)
        .chain(&rs.keepalive.examples)
        .chain(&rs.windows.examples)
        .chain(&rs.premature.examples)
        .cloned()
        .collect();
    restart_examples.truncate(SHOWN);
    let restart_ok =
        rs.cap.passed() && rs.oracle.passed() && rs.keepalive.passed() && rs.windows.passed() && rs.premature.passed();
    report.line(
        "C7",
        "restart resilience",
        restart_ok,
        format!(
            "{RESTART_SCRIPTS} scripts of 30 days with {restart_count} restarts, each also run without load: cap {} / oracle {} / keepalive {} / window {} / deprovision {} violations, max spec {}, min per 7-day window {} (zero load), max drift {} s without load (allowed {p} per restart), {} s with load (outage time allowed), {restart_secs:.1} s",
            rs.cap.violations,
            rs.oracle.violations,
            rs.keepalive.violations,
            rs.windows.violations,
            rs.premature.violations,
            rs.max_spec,
            rs.min_window.unwrap_or(0),
            rs.max_drift_idle,
            rs.max_drift
        ),
        &restart_examples,
    );

    report.line(
        "C9",
        "wire exactness",
        wire.violations == 0 && requests > 0,
        format!("{requests} manager requests inspected, {} violations", wire.violations),
        &wire.examples,
    );
}

/// Relative path, mode and contents of every entry below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, (u32, Vec<u8>)> {
    use std::os::unix::fs::PermissionsExt;
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            let meta = std::fs::metadata(&path).unwrap();
            let rel = path.strip_prefix(dir).unwrap().display().to_string();
            if meta.is_dir() {
                out.insert(rel, (meta.permissions().mode(), Vec::new()));
                stack.push(path);
            } else {
                out.insert(rel, (meta.permissions().mode(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out
}

fn wait_for(mut done: impl FnMut() -> bool) -> bool {
    let began = Instant::now();
    while began.elapsed() < PROCESS_WAIT {
        if done() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    done()
}

fn bootstrap_criterion(report: &mut Report) {
    let mut t = Tally::default();
    let result = bootstrap_run(&mut t);
    if let Err(e) = result {
        t.fail(format!("bootstrap run aborted: {e:#}"));
    }
    report.tally(
        "C8",
        "bootstrap idempotence and separation",
        &t,
        "double init and one job under a real runner process".into(),
    );
}

fn bootstrap_run(t: &mut Tally) -> anyhow::Result<()> {
    let root = tempfile::tempdir()?;
    let persistent = root.path().join("persistent");
    let work = root.path().join("work");
    std::fs::create_dir_all(&persistent)?;
    let mut profile = RunnerProfile::new(&persistent, &work);
    profile.labels = runner_manager::labels::LabelSet::new(["self-hosted", "linux-gpu-cuda"]);

    let clock = Arc::new(ManualClock::new(runner_harness::scenario::epoch()));
    let gh = shared(FakeGithub::new(FakeGithubConfig::default(), 0));
    let server = serve_http(Arc::clone(&gh), clock.clone())?;
    let cfg = FakeGithubConfig::default();
    let repo = RepoCoordinates::new(&cfg.owner, &cfg.repo)?;
    let transport = Arc::new(UreqTransport::new(&TlsRoots::WebPki)?);
    let mut client = GithubClient::new(transport, &server.base_url(), SecretToken::new(&cfg.pat), clock.clone());
    let mode = ConfigureMode::Direct { api_base: server.base_url() };
    let deadline = clock.now() + chrono::Duration::seconds(60);

    let first = init_runner_dir(&profile, &repo, &mut client, &mode, clock.now(), deadline)?;
    t.add((first.status != InitStatus::Initialized).then(|| format!("first init returned {:?}", first.status)));
    let before = snapshot(&persistent);
    clock.advance(chrono::Duration::seconds(3600));
    let second =
        init_runner_dir(&profile, &repo, &mut client, &mode, clock.now(), deadline + chrono::Duration::seconds(3600))?;
    t.add(
        (second.status != InitStatus::AlreadyInitialized).then(|| format!("second init returned {:?}", second.status)),
    );
    t.add((snapshot(&persistent) != before).then(|| "second init changed the persistent directory".to_string()));

    let now = runner_harness::scenario::to_sim(clock.now());
    gh.lock().unwrap().enqueue_job(1, vec!["self-hosted".into(), "linux-gpu-cuda".into()], Some(30), None, now);
    let env: HashMap<String, String> = [
        (FAKE_RUNNER_ENV.to_string(), env!("CARGO_BIN_EXE_fake-runner").to_string()),
        (POLL_MS_ENV.to_string(), "50".to_string()),
    ]
    .into();
    // The runner inherits the poll interval from this process's environment.
    std::env::set_var(POLL_MS_ENV, "50");
    let shutdown = Shutdown::new();
    let runner = {
        let (profile, env, shutdown) = (profile.clone(), env.clone(), shutdown.clone());
        std::thread::spawn(move || run_runner(&profile, &env, &shutdown))
    };
    let status = |gh: &runner_harness::serve::Shared<FakeGithub>| gh.lock().unwrap().job(1).map(|j| j.status);
    let claimed = wait_for(|| status(&gh) == Some(JobStatus::InProgress));
    t.add((!claimed).then(|| format!("runner did not claim the job (status {:?})", status(&gh))));
    clock.advance(chrono::Duration::seconds(60));
    let log = persistent.join("_diag").join("runner.log");
    let finished = wait_for(|| std::fs::read_to_string(&log).is_ok_and(|l| l.contains("job 1 finished")));
    t.add((!finished).then(|| "runner did not report the job finished".to_string()));
    shutdown.request();
    let code = runner.join().map_err(|_| anyhow::anyhow!("runner thread panicked"))??;
    t.add((code != 0).then(|| format!("runner exited with {code}")));
    t.add((status(&gh) != Some(JobStatus::Completed)).then(|| format!("job ended as {:?}", status(&gh))));

    let in_work = snapshot(&work);
    let in_persistent = snapshot(&persistent);
    let ws = job_workspace(&work, 1);
    t.add((!ws.join("job.json").is_file()).then(|| format!("no workspace at {}", ws.display())));
    let state_names = [MARKER_FILE, RUNNER_CONFIG_FILE, "runner.log"];
    for path in in_work.keys() {
        let name = Path::new(path).file_name().and_then(|n| n.to_str()).unwrap_or("");
        t.add(state_names.contains(&name).then(|| format!("runner state {path} found under work_dir")));
    }
    for name in state_names {
        let found = in_persistent.keys().any(|p| Path::new(p).file_name().and_then(|n| n.to_str()) == Some(name));
        t.add((!found).then(|| format!("{name} missing from persistent_dir")));
    }
    for path in in_persistent.keys() {
        t.add(
            (path.contains("_work") || path.ends_with("job.json"))
                .then(|| format!("workspace artifact {path} under persistent_dir")),
        );
    }
    drop(server);
    Ok(())
}

fn manifest_criterion(report: &mut Report) {
    let mut t = Tally::default();
    let repo = RepoCoordinates::new("biocore", "unifrac").unwrap();
    let input = ManifestInput::new(repo, "ci", "gpu-runner");
    let profile = RunnerProfile::new("/persistent", "/work");
    let text = emit_manifests(&input, &profile);
    let docs: Vec<serde_json::Value> = serde_yaml::Deserializer::from_str(&text)
        .map(|d| serde_yaml::from_value::<serde_json::Value>(serde_yaml::Value::deserialize(d).unwrap()).unwrap())
        .collect();
    let runner = docs
        .iter()
        .find(|d| d["kind"] == "Deployment" && d["metadata"]["name"] == "gpu-runner")
        .cloned()
        .unwrap_or_default();
    let container = &runner["spec"]["template"]["spec"]["containers"][0];
    let requests = &container["resources"]["requests"];
    let expect = [
        ("cpu", "4"),
        ("memory", "8Gi"),
        ("ephemeral-storage", "80Gi"),
        (runner_manager::bootstrap::DEFAULT_GPU_RESOURCE, "1"),
    ];
    for (key, want) in expect {
        t.add((requests[key] != want).then(|| format!("requests.{key} = {}, want {want}", requests[key])));
    }
    t.add((runner["spec"]["replicas"] != 0).then(|| format!("runner replicas = {}", runner["spec"]["replicas"])));
    let labels = container["env"]
        .as_array()
        .and_then(|env| env.iter().find(|e| e["name"] == "RUNNER_LABELS"))
        .and_then(|e| e["value"].as_str())
        .unwrap_or_default()
        .to_string();
    t.add(
        (!labels.split(',').any(|l| l == "linux-gpu-cuda"))
            .then(|| format!("runner labels {labels:?} lack linux-gpu-cuda")),
    );

    // Every document must be accepted by an API server in the target namespace.
    let kube_cfg = FakeKubeConfig { namespace: "ci".into(), ..Default::default() };
    let token = kube_cfg.service_account_token.clone();
    let mut kube = FakeKube::empty(kube_cfg);
    for doc in &docs {
        let kind = doc["kind"].as_str().unwrap_or_default();
        let Some(path) = collection_path("ci", kind) else {
            t.fail(format!("no API path for kind {kind}"));
            continue;
        };
        let req = HttpRequest::new(Method::Post, format!("http://kube{path}"))
            .with_header("Authorization", format!("Bearer {token}"))
            .with_body("application/json", serde_json::to_vec(doc).unwrap());
        let resp = kube.handle(&req, 0);
        t.add(
            (resp.status != 201)
                .then(|| format!("POST {kind} {}: {} {}", doc["metadata"]["name"], resp.status, resp.body_snippet())),
        );
    }
    t.add(
        (kube.spec_replicas("gpu-runner") != Some(0))
            .then(|| "created runner deployment is not at 0 replicas".to_string()),
    );
    t.add((!kube.namespace_violations().is_empty()).then(|| format!("{:?}", kube.namespace_violations())));
    report.tally("C10", "manifest fidelity", &t, format!("{} documents emitted and applied", docs.len()));
}

#[test]
fn acceptance() {
    let began = Instant::now();
    let _ = writeln!(std::io::stderr(), "acceptance suite started {}", runner_manager::clock::rfc3339(Utc::now()));
    let mut report = Report { lines: Vec::new() };
    sim_criteria(&mut report);
    bootstrap_criterion(&mut report);
    manifest_criterion(&mut report);
    let failed: Vec<&str> = report.lines.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    let _ = writeln!(
        std::io::stderr(),
        "acceptance: {} of {} criteria passed in {:.1} s",
        report.lines.len() - failed.len(),
        report.lines.len(),
        began.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
