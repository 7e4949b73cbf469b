//! The real clients, manager and fake-runner process against the fakes
//! served over loopback HTTP, with a manually driven clock.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use runner_harness::fake_github::{FakeGithub, FakeGithubConfig, JobStatus};
use runner_harness::fake_kube::{FakeKube, FakeKubeConfig};
use runner_harness::fake_runner::{job_workspace, RunnerCore, POLL_MS_ENV};
use runner_harness::scenario::{epoch, SimTime};
use runner_harness::serve::{serve_http, shared, HttpServer, Shared};
use runner_manager::bootstrap::{
    init_runner_dir, run_runner, BootstrapError, ConfigureMode, RunnerProfile, FAKE_RUNNER_ENV, PERSISTENT_DIR_ENV,
    WORK_DIR_ENV,
};
use runner_manager::clock::{rfc3339, Clock, ManualClock, Shutdown};
use runner_manager::config::load_config;
use runner_manager::github::{GithubClient, GithubError};
use runner_manager::http::{HttpRequest, HttpResponse, TlsRoots, Transport, TransportError, UreqTransport};
use runner_manager::kube::{KubeClient, KubeCredentials, KubeError, PodPhase};
use runner_manager::labels::LabelSet;
use runner_manager::reconciler::{Manager, Reason, ReconcileRecord, TickOutcome};
use runner_manager::repo::RepoCoordinates;
use runner_manager::secret::SecretToken;
use runner_manager::service::{build_manager, Runtime};

const LAST_ACTIVE: &str = "runner-manager/last-active";
const PROCESS_WAIT: Duration = Duration::from_secs(30);

fn gpu_labels() -> Vec<String> {
    vec!["self-hosted".into(), "linux-gpu-cuda".into()]
}

struct Fakes {
    clock: Arc<ManualClock>,
    github: Shared<FakeGithub>,
    kube: Shared<FakeKube>,
    github_server: HttpServer,
    kube_server: HttpServer,
}

impl Fakes {
    fn new(annotations: BTreeMap<String, String>) -> Self {
        let clock = Arc::new(ManualClock::new(epoch()));
        let github = shared(FakeGithub::new(FakeGithubConfig { log_requests: true, ..Default::default() }, 0));
        let kube = shared(FakeKube::new(FakeKubeConfig { log_requests: true, ..Default::default() }, annotations));
        let github_server = serve_http(Arc::clone(&github), clock.clone()).unwrap();
        let kube_server = serve_http(Arc::clone(&kube), clock.clone()).unwrap();
        Self { clock, github, kube, github_server, kube_server }
    }

    fn idle() -> Self {
        Self::new(BTreeMap::new())
    }

    fn set(&self, t: SimTime) {
        self.clock.set(runner_harness::scenario::to_datetime(t));
    }

    fn repo(&self) -> RepoCoordinates {
        let cfg = FakeGithubConfig::default();
        RepoCoordinates::new(cfg.owner, cfg.repo).unwrap()
    }

    fn transport() -> Arc<dyn Transport> {
        Arc::new(UreqTransport::new(&TlsRoots::WebPki).unwrap())
    }

    fn github_client(&self) -> GithubClient {
        let pat = FakeGithubConfig::default().pat;
        GithubClient::new(Self::transport(), &self.github_server.base_url(), SecretToken::new(pat), self.clock.clone())
    }

    fn kube_credentials(&self, namespace: &str) -> KubeCredentials {
        KubeCredentials {
            api_base: self.kube_server.base_url(),
            bearer_token: SecretToken::new(FakeKubeConfig::default().service_account_token),
            tls_roots: TlsRoots::WebPki,
            namespace: namespace.into(),
        }
    }

    fn kube_client(&self) -> KubeClient {
        KubeClient::new(Self::transport(), self.kube_credentials("ci"), self.clock.clone(), 1)
    }

    fn manager(
        &self,
        github_transport: Arc<dyn Transport>,
        shutdown: Shutdown,
    ) -> (Manager, Arc<Mutex<Vec<ReconcileRecord>>>) {
        let args: Vec<String> = [
            "--owner",
            "biocore",
            "--repo",
            "unifrac",
            "--namespace",
            "ci",
            "--deployment",
            "gpu-runner",
            "--github-api",
            &self.github_server.base_url(),
            "--kube-api",
            &self.kube_server.base_url(),
            "--status-addr",
            "disabled",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let env = HashMap::from([("GITHUB_TOKEN".to_string(), FakeGithubConfig::default().pat)]);
        let config = load_config(&args, &env).unwrap();
        let records = Arc::new(Mutex::new(Vec::new()));
        let sink = {
            let records = Arc::clone(&records);
            move |r: &ReconcileRecord| records.lock().unwrap().push(r.clone())
        };
        let runtime = Runtime {
            github_transport,
            kube_transport: Self::transport(),
            kube_credentials: self.kube_credentials("ci"),
            clock: self.clock.clone(),
            shutdown,
            sink: Box::new(sink),
        };
        (build_manager(&config, runtime), records)
    }

    fn scale_writes(&self) -> Vec<(SimTime, u32)> {
        self.kube.lock().unwrap().scale_writes().iter().map(|w| (w.at, w.to)).collect()
    }

    fn kube_requests(&self) -> u64 {
        self.kube.lock().unwrap().wire().requests
    }
}

fn deadline(f: &Fakes, secs: i64) -> DateTime<Utc> {
    f.clock.now() + chrono::Duration::seconds(secs)
}

fn statuses() -> BTreeSet<String> {
    ["queued".to_string(), "in_progress".to_string()].into()
}

fn runner_labels() -> LabelSet {
    LabelSet::new(["self-hosted", "linux-gpu-cuda", "x64"])
}

#[test]
fn outstanding_jobs_match_labels() {
    let f = Fakes::idle();
    {
        let mut gh = f.github.lock().unwrap();
        gh.enqueue_job(1, gpu_labels(), None, None, 0);
        gh.enqueue_job(2, gpu_labels(), None, None, 0);
        gh.enqueue_job(3, vec!["ubuntu-latest".into()], None, None, 0);
    }
    let mut c = f.github_client();
    let jobs = c.list_outstanding_jobs(&f.repo(), &statuses(), &runner_labels(), deadline(&f, 60)).unwrap();
    assert_eq!(jobs.iter().map(|j| j.job_id).collect::<Vec<_>>(), vec![1, 2]);
    let again = c.list_outstanding_jobs(&f.repo(), &statuses(), &runner_labels(), deadline(&f, 60)).unwrap();
    assert_eq!(jobs, again);
    let gh = f.github.lock().unwrap();
    assert!(gh.wire().is_clean(), "{:?}", gh.wire().violations);
    assert!(gh.request_log().len() >= 2);
}

#[test]
fn no_runs_means_no_jobs() {
    let f = Fakes::idle();
    let jobs =
        f.github_client().list_outstanding_jobs(&f.repo(), &statuses(), &runner_labels(), deadline(&f, 60)).unwrap();
    assert!(jobs.is_empty());
}

#[test]
fn pagination_over_runs_and_jobs() {
    let f = Fakes::idle();
    {
        let mut gh = f.github.lock().unwrap();
        // 150 jobs in one run, then 150 single-job runs.
        for id in 1..=150 {
            gh.enqueue_job(id, gpu_labels(), None, (id > 1).then_some(1), 0);
        }
        for id in 151..=300 {
            gh.enqueue_job(id, gpu_labels(), None, None, 1);
        }
    }
    let jobs =
        f.github_client().list_outstanding_jobs(&f.repo(), &statuses(), &runner_labels(), deadline(&f, 60)).unwrap();
    let expected = f.github.lock().unwrap().jobs().filter(|j| j.status == JobStatus::Queued).count();
    assert_eq!(jobs.len(), 300);
    assert_eq!(jobs.len(), expected);
    let ids: BTreeSet<u64> = jobs.iter().map(|j| j.job_id).collect();
    assert_eq!(ids.len(), 300);
}

#[test]
fn retry_after_sets_next_attempt() {
    let f = Fakes::idle();
    f.github.lock().unwrap().add_rate_limit(429, 120, 600, 0);
    let mut c = f.github_client();
    let err = c.list_outstanding_jobs(&f.repo(), &statuses(), &runner_labels(), deadline(&f, 60)).unwrap_err();
    assert!(matches!(err, GithubError::RateLimited { status: 429, .. }), "{err:?}");
    assert_eq!(c.backoff().next_allowed_attempt, Some(f.clock.now() + chrono::Duration::seconds(120)));
    assert_eq!(c.backoff().consecutive_failures, 1);
}

#[test]
fn registration_token_round_trip() {
    let f = Fakes::idle();
    f.set(500);
    let token = f.github_client().create_registration_token(&f.repo(), deadline(&f, 60)).unwrap();
    assert_eq!(token.token.expose(), "REG-abc");
    assert_eq!(token.expires_at, f.clock.now() + chrono::Duration::hours(1));
}

#[test]
fn forbidden_registration_is_a_credential_error() {
    let f = Fakes::idle();
    f.github.lock().unwrap().set_fault(Some(403), 0);
    let err = f.github_client().create_registration_token(&f.repo(), deadline(&f, 60)).unwrap_err();
    assert!(err.is_credential(), "{err:?}");
    let mut wrong =
        GithubClient::new(Fakes::transport(), &f.github_server.base_url(), SecretToken::new("nope"), f.clock.clone());
    f.github.lock().unwrap().set_fault(None, 0);
    assert!(wrong.list_runs(&f.repo(), "queued", deadline(&f, 60)).unwrap_err().is_credential());
}

#[test]
fn scale_read_write_and_status_lag() {
    let f = Fakes::idle();
    let k = f.kube_client();
    assert_eq!(k.read_scale("gpu-runner").unwrap().spec_replicas, 0);
    k.write_scale("gpu-runner", 1).unwrap();
    let lagging = k.read_scale("gpu-runner").unwrap();
    assert_eq!((lagging.spec_replicas, lagging.status_replicas), (1, 0));
    let pods = k.list_runner_pods("app=gpu-runner").unwrap();
    assert_eq!(pods.len(), 1);
    assert_eq!(pods[0].phase, PodPhase::Pending);

    f.set(FakeKubeConfig::default().pod_startup_secs as SimTime + 1);
    let settled = k.read_scale("gpu-runner").unwrap();
    assert_eq!((settled.spec_replicas, settled.status_replicas), (1, 1));
    let pods = k.list_runner_pods("app=gpu-runner").unwrap();
    assert_eq!(pods.iter().map(|p| p.phase).collect::<Vec<_>>(), vec![PodPhase::Running]);
    assert!(k.list_runner_pods("app=something-else").unwrap().is_empty());

    // Idempotent write: no pod churn.
    k.write_scale("gpu-runner", 1).unwrap();
    assert_eq!(k.list_runner_pods("app=gpu-runner").unwrap(), pods);

    k.write_scale("gpu-runner", 0).unwrap();
    assert!(k.list_runner_pods("app=gpu-runner").unwrap().is_empty());
    let kube = f.kube.lock().unwrap();
    assert!(kube.wire().is_clean(), "{:?}", kube.wire().violations);
    assert!(kube.namespace_violations().is_empty());
}

#[test]
fn missing_deployment_and_cap() {
    let f = Fakes::idle();
    let k = f.kube_client();
    assert_eq!(k.read_scale("absent").unwrap_err(), KubeError::MissingDeployment("absent".into()));
    let before = f.kube_requests();
    assert_eq!(k.write_scale("gpu-runner", 2).unwrap_err(), KubeError::Precondition { requested: 2, cap: 1 });
    assert_eq!(f.kube_requests(), before, "the rejected write reached the server");
}

#[test]
fn annotations_round_trip() {
    let f = Fakes::idle();
    let k = f.kube_client();
    assert!(!k.read_annotations("gpu-runner").unwrap().contains_key(LAST_ACTIVE));
    k.write_annotation("gpu-runner", LAST_ACTIVE, "2024-01-01T00:00:00Z").unwrap();
    assert_eq!(k.read_annotations("gpu-runner").unwrap()[LAST_ACTIVE], "2024-01-01T00:00:00Z");
    k.write_annotation("gpu-runner", LAST_ACTIVE, "2024-01-02T00:00:00Z").unwrap();
    assert_eq!(k.read_annotations("gpu-runner").unwrap()[LAST_ACTIVE], "2024-01-02T00:00:00Z");
    k.remove_annotation("gpu-runner", LAST_ACTIVE).unwrap();
    assert!(!k.read_annotations("gpu-runner").unwrap().contains_key(LAST_ACTIVE));
    assert_eq!(f.kube.lock().unwrap().spec_replicas("gpu-runner"), Some(0));
}

#[test]
fn other_namespace_is_refused_and_flagged() {
    let f = Fakes::idle();
    let k = KubeClient::new(Fakes::transport(), f.kube_credentials("kube-system"), f.clock.clone(), 1);
    assert!(k.read_scale("gpu-runner").unwrap_err().is_credential());
    assert_eq!(f.kube.lock().unwrap().namespace_violations().len(), 1);
}

#[test]
fn idle_polls_with_fresh_keepalive_write_nothing() {
    let fresh = BTreeMap::from([(LAST_ACTIVE.to_string(), rfc3339(epoch() - chrono::Duration::hours(1)))]);
    let f = Fakes::new(fresh);
    let (mut m, records) = f.manager(Fakes::transport(), Shutdown::new());
    for i in 0..10 {
        f.set(i * 60);
        assert!(matches!(m.reconcile_once(f.clock.now()).unwrap(), TickOutcome::Completed(_)));
    }
    assert!(f.scale_writes().is_empty());
    let records = records.lock().unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| r.reason == Some(Reason::Idle) && !r.wrote_scale));
}

/// Requests shutdown as soon as the first GitHub response arrives.
struct ShutdownAfterFirst {
    inner: Arc<dyn Transport>,
    shutdown: Shutdown,
}

impl Transport for ShutdownAfterFirst {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let response = self.inner.send(request);
        self.shutdown.request();
        response
    }
}

#[test]
fn shutdown_mid_poll_changes_nothing() {
    let f = Fakes::idle();
    f.github.lock().unwrap().enqueue_job(1, gpu_labels(), None, None, 0);
    let shutdown = Shutdown::new();
    let transport = Arc::new(ShutdownAfterFirst { inner: Fakes::transport(), shutdown: shutdown.clone() });
    let (mut m, records) = f.manager(transport, shutdown);
    assert_eq!(m.reconcile_once(f.clock.now()).unwrap(), TickOutcome::Abandoned);
    assert!(f.scale_writes().is_empty());
    assert!(records.lock().unwrap().is_empty());
    assert_eq!(f.kube.lock().unwrap().spec_replicas("gpu-runner"), Some(0));
}

#[test]
fn single_job_scales_up_then_down() {
    let fresh = BTreeMap::from([(LAST_ACTIVE.to_string(), rfc3339(epoch()))]);
    let f = Fakes::new(fresh);
    let (mut m, _) = f.manager(Fakes::transport(), Shutdown::new());
    let mut runner = RunnerCore::new("gpu-runner-x", LabelSet::new(gpu_labels()), "REG-abc");
    let end = 1200;
    for t in 0..=end {
        f.set(t);
        if t == 10 {
            f.github.lock().unwrap().enqueue_job(1, gpu_labels(), Some(300), None, t);
        }
        let running = f.kube.lock().unwrap().running_pods("gpu-runner") > 0;
        if running && t % 10 == 0 {
            let mut gh = f.github.lock().unwrap();
            gh.settle(t);
            runner.tick(&mut *gh, t);
        }
        if t % 60 == 0 {
            m.reconcile_once(f.clock.now()).unwrap();
        }
    }
    let job = f.github.lock().unwrap().job(1).cloned().unwrap();
    assert_eq!(job.status, JobStatus::Completed);
    let completed = job.completed_at.unwrap();
    let writes = f.scale_writes();
    assert_eq!(writes.len(), 2, "{writes:?}");
    assert_eq!(writes[0], (60, 1));
    assert_eq!(writes[1].1, 0);
    assert!(writes[1].0 > completed && writes[1].0 <= completed + 60, "{writes:?} completed {completed}");
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

fn initialized_profile(f: &Fakes, root: &Path) -> RunnerProfile {
    let persistent = root.join("persistent");
    std::fs::create_dir_all(&persistent).unwrap();
    let mut profile = RunnerProfile::new(&persistent, root.join("work"));
    profile.labels = LabelSet::new(gpu_labels());
    let mode = ConfigureMode::Direct { api_base: f.github_server.base_url() };
    let mut c = f.github_client();
    init_runner_dir(&profile, &f.repo(), &mut c, &mode, f.clock.now(), deadline(f, 60)).unwrap();
    profile
}

fn spawn_fake_runner(profile: &RunnerProfile) -> Child {
    Command::new(env!("CARGO_BIN_EXE_fake-runner"))
        .env(PERSISTENT_DIR_ENV, &profile.persistent_dir)
        .env(WORK_DIR_ENV, &profile.work_dir)
        .env(POLL_MS_ENV, "50")
        .stdout(Stdio::null())
        .spawn()
        .unwrap()
}

fn terminate(child: &Child) {
    let status = Command::new("kill").arg("-TERM").arg(child.id().to_string()).status().unwrap();
    assert!(status.success());
}

fn wait_exit(child: &mut Child) -> Option<i32> {
    let mut code = None;
    wait_for(|| match child.try_wait().unwrap() {
        Some(s) => {
            code = s.code();
            true
        }
        None => false,
    });
    code
}

#[test]
fn fake_runner_claims_only_matching_jobs_and_exits_on_sigterm() {
    let f = Fakes::idle();
    let root = tempfile::tempdir().unwrap();
    let profile = initialized_profile(&f, root.path());
    {
        let mut gh = f.github.lock().unwrap();
        gh.enqueue_job(1, vec!["self-hosted".into(), "windows".into()], Some(30), None, 0);
        gh.enqueue_job(2, gpu_labels(), Some(30), None, 0);
    }
    let mut child = spawn_fake_runner(&profile);
    let status = |id| f.github.lock().unwrap().job(id).map(|j| j.status);
    assert!(wait_for(|| status(2) == Some(JobStatus::InProgress)), "matching job not claimed");
    assert!(job_workspace(&profile.work_dir, 2).join("job.json").is_file());
    f.set(60);
    let log = profile.persistent_dir.join("_diag").join("runner.log");
    assert!(wait_for(|| std::fs::read_to_string(&log).is_ok_and(|l| l.contains("job 2 finished"))));
    assert_eq!(status(1), Some(JobStatus::Queued), "foreign-label job was claimed");
    assert_eq!(f.github.lock().unwrap().runner_count(), 1);

    terminate(&child);
    assert_eq!(wait_exit(&mut child), Some(0));
    assert_eq!(f.github.lock().unwrap().runner_count(), 0, "runner did not deregister");
    assert_eq!(status(1), Some(JobStatus::Queued));
}

#[test]
fn run_runner_forwards_termination() {
    let f = Fakes::idle();
    let root = tempfile::tempdir().unwrap();
    let profile = initialized_profile(&f, root.path());
    let env = HashMap::from([(FAKE_RUNNER_ENV.to_string(), env!("CARGO_BIN_EXE_fake-runner").to_string())]);
    let shutdown = Shutdown::new();
    let handle = {
        let (profile, shutdown) = (profile.clone(), shutdown.clone());
        std::thread::spawn(move || run_runner(&profile, &env, &shutdown))
    };
    assert!(wait_for(|| f.github.lock().unwrap().runner_count() == 1), "runner never registered");
    shutdown.request();
    assert_eq!(handle.join().unwrap().unwrap(), 0);
    assert_eq!(f.github.lock().unwrap().runner_count(), 0);
}

#[test]
fn run_runner_refuses_without_marker() {
    let root = tempfile::tempdir().unwrap();
    let persistent = root.path().join("persistent");
    std::fs::create_dir_all(&persistent).unwrap();
    let profile = RunnerProfile::new(&persistent, root.path().join("work"));
    let env = HashMap::from([(FAKE_RUNNER_ENV.to_string(), env!("CARGO_BIN_EXE_fake-runner").to_string())]);
    let err = run_runner(&profile, &env, &Shutdown::new()).unwrap_err();
    assert!(matches!(err, BootstrapError::NotInitialized(_)), "{err:?}");
    assert!(err.to_string().contains("runner-bootstrap init"));
    assert!(!root.path().join("work").exists());
}
