//! Process assembly and the endless control loop.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::clock::{Clock, Shutdown};
use crate::config::{Config, IN_CLUSTER};
use crate::github::GithubClient;
use crate::http::{TlsRoots, Transport, UreqTransport};
use crate::kube::{load_incluster_credentials, KubeClient, KubeCredentials};
use crate::policy::delta;
use crate::reconciler::{Manager, ManagerSettings, ReconcileError, RecordSink, TickOutcome};
use crate::status::{serve_status, StatusHandle, StatusReport};

/// Consecutive polls rejected with a credential error before giving up.
pub const CREDENTIAL_FAILURE_LIMIT: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServiceExit {
    /// Shutdown requested; no further writes were issued.
    Terminated,
    CredentialFailure(String),
    Fatal(String),
}

impl ServiceExit {
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceExit::Terminated => 0,
            ServiceExit::CredentialFailure(_) => 2,
            ServiceExit::Fatal(_) => 3,
        }
    }
}

/// Everything the loop needs besides configuration.
pub struct Runtime {
    pub github_transport: Arc<dyn Transport>,
    pub kube_transport: Arc<dyn Transport>,
    pub kube_credentials: KubeCredentials,
    pub clock: Arc<dyn Clock>,
    pub shutdown: Shutdown,
    pub sink: Box<dyn RecordSink>,
}

pub fn build_manager(config: &Config, runtime: Runtime) -> Manager {
    let github = GithubClient::new(
        runtime.github_transport,
        &config.github_api_base,
        config.github_token.clone(),
        Arc::clone(&runtime.clock),
    );
    let kube = KubeClient::new(
        runtime.kube_transport,
        runtime.kube_credentials,
        Arc::clone(&runtime.clock),
        config.policy.max_runners,
    );
    let settings = ManagerSettings {
        repo: config.repo.clone(),
        deployment: config.kube_deployment.clone(),
        pod_selector: config.pod_selector.clone(),
        policy: config.policy.clone(),
    };
    Manager::new(github, kube, settings, runtime.clock, runtime.shutdown, runtime.sink)
}

/// Runs one reconcile per poll tick until shutdown or an unrecoverable error.
/// Ticks are anchored at the loop start; a tick missed because an iteration
/// overran is skipped rather than run late.
pub fn run_loop(
    manager: &mut Manager,
    clock: &dyn Clock,
    shutdown: &Shutdown,
    status: Option<&StatusHandle>,
) -> ServiceExit {
    let period = delta(manager.settings().policy.poll_interval);
    let mut tick: DateTime<Utc> = clock.now();
    let mut credential_failures = 0u32;
    if let Some(h) = status {
        h.set_alive(true);
    }
    let exit = loop {
        if !clock.sleep_until(tick) || shutdown.is_requested() {
            break ServiceExit::Terminated;
        }
        match manager.reconcile_once(tick) {
            Ok(TickOutcome::Completed(_)) => credential_failures = 0,
            Ok(TickOutcome::Abandoned) => break ServiceExit::Terminated,
            Err(ReconcileError::Fatal(e)) => {
                tracing::error!(error = %e, "unrecoverable Kubernetes error");
                break ServiceExit::Fatal(e.to_string());
            }
            Err(e) => {
                credential_failures += 1;
                tracing::error!(error = %e, attempt = credential_failures, "credential rejected");
                if credential_failures >= CREDENTIAL_FAILURE_LIMIT {
                    break ServiceExit::CredentialFailure(format!("{e} on {credential_failures} consecutive polls"));
                }
            }
        }
        if let Some(h) = status {
            h.publish(StatusReport::from_manager(manager));
        }
        tick += period;
        let now = clock.now();
        while tick < now {
            tick += period;
        }
    };
    if let Some(h) = status {
        h.set_alive(false);
    }
    exit
}

/// Runs with caller-supplied transports and clock; the status server is
/// started if configured.
pub fn run_service_with(config: &Config, runtime: Runtime) -> ServiceExit {
    let clock = Arc::clone(&runtime.clock);
    let shutdown = runtime.shutdown.clone();
    let mut manager = build_manager(config, runtime);
    let handle = StatusHandle::new(StatusReport::from_manager(&manager));
    let _server = match config.status_listen_address {
        Some(addr) => match serve_status(addr, handle.clone(), shutdown.clone()) {
            Ok(server) => {
                tracing::info!(addr = %server.local_addr(), "status server listening");
                Some(server)
            }
            Err(e) => return ServiceExit::Fatal(format!("cannot bind status server on {addr}: {e}")),
        },
        None => None,
    };
    tracing::info!(
        repository = %config.repo,
        namespace = %config.kube_namespace,
        deployment = %config.kube_deployment,
        "runner manager started"
    );
    run_loop(&mut manager, clock.as_ref(), &shutdown, Some(&handle))
}

/// Production entry point: real HTTP, in-cluster (or overridden) Kubernetes
/// credentials, decision records on stdout.
pub fn run_service(
    config: &Config,
    clock: Arc<dyn Clock>,
    shutdown: Shutdown,
    env: &HashMap<String, String>,
) -> ServiceExit {
    let api_override = (config.kube_api_base != IN_CLUSTER).then_some(config.kube_api_base.as_str());
    let creds =
        match load_incluster_credentials(&config.kube_mount_root, env, api_override, Some(&config.kube_namespace)) {
            Ok(c) => c,
            Err(e) => return ServiceExit::Fatal(format!("Kubernetes credentials: {e}")),
        };
    let github_transport = match UreqTransport::new(&TlsRoots::WebPki) {
        Ok(t) => t,
        Err(e) => return ServiceExit::Fatal(format!("GitHub transport: {e}")),
    };
    let kube_transport = match UreqTransport::new(&creds.tls_roots) {
        Ok(t) => t,
        Err(e) => return ServiceExit::Fatal(format!("Kubernetes transport: {e}")),
    };
    let runtime = Runtime {
        github_transport: Arc::new(github_transport),
        kube_transport: Arc::new(kube_transport),
        kube_credentials: creds,
        clock,
        shutdown,
        sink: Box::new(crate::reconciler::JsonLinesSink::stdout()),
    };
    run_service_with(config, runtime)
}
