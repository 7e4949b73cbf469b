//! Read-only health and status endpoint.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::clock::Shutdown;
use crate::policy::delta;
use crate::reconciler::{Decision, Manager};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StatusReport {
    pub last_poll_time: Option<DateTime<Utc>>,
    pub last_decision: Option<Decision>,
    pub observed_replicas: Option<u32>,
    pub consecutive_github_errors: u32,
    pub consecutive_kube_errors: u32,
    /// Absent until a runner has been seen, meaning a keepalive is due now.
    pub keepalive_next_due: Option<DateTime<Utc>>,
    pub last_active: Option<DateTime<Utc>>,
    pub github_backoff_until: Option<DateTime<Utc>>,
    pub repository: String,
    pub namespace: String,
    pub deployment: String,
}

impl StatusReport {
    pub fn from_manager(manager: &Manager) -> Self {
        let settings = manager.settings();
        let record = manager.last_record();
        let state = manager.state();
        Self {
            last_poll_time: record.map(|r| r.time),
            last_decision: record.and_then(|r| r.decision()),
            observed_replicas: record.and_then(|r| r.observed),
            consecutive_github_errors: manager.consecutive_github_errors(),
            consecutive_kube_errors: manager.consecutive_kube_errors(),
            keepalive_next_due: state.last_active.map(|at| at + delta(settings.policy.keepalive_idle_limit())),
            last_active: state.last_active,
            github_backoff_until: manager.github_backoff_until(),
            repository: settings.repo.to_string(),
            namespace: manager.namespace().to_string(),
            deployment: settings.deployment.clone(),
        }
    }
}

/// Snapshot shared between the control loop (writer) and the HTTP thread.
#[derive(Clone, Debug, Default)]
pub struct StatusHandle {
    report: Arc<RwLock<Arc<StatusReport>>>,
    alive: Arc<AtomicBool>,
}

impl StatusHandle {
    pub fn new(initial: StatusReport) -> Self {
        Self { report: Arc::new(RwLock::new(Arc::new(initial))), alive: Arc::new(AtomicBool::new(false)) }
    }

    pub fn publish(&self, report: StatusReport) {
        let mut slot = self.report.write().unwrap_or_else(|e| e.into_inner());
        *slot = Arc::new(report);
    }

    pub fn snapshot(&self) -> Arc<StatusReport> {
        Arc::clone(&self.report.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn set_alive(&self, alive: bool) {
        self.alive.store(alive, Ordering::SeqCst);
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }
}

pub struct StatusServer {
    addr: SocketAddr,
    stop: Shutdown,
    thread: Option<JoinHandle<()>>,
}

impl StatusServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.finish();
    }

    fn finish(&mut self) {
        self.stop.request();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StatusServer {
    fn drop(&mut self) {
        self.finish();
    }
}

/// Serves `GET /healthz` and `GET /status` until `shutdown` is requested or
/// the returned server is dropped.
pub fn serve_status(addr: SocketAddr, handle: StatusHandle, shutdown: Shutdown) -> std::io::Result<StatusServer> {
    let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
    let local =
        server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("status server bound to a non-IP address"))?;
    let stop = Shutdown::new();
    let stop_thread = stop.clone();
    let thread = std::thread::Builder::new().name("status".into()).spawn(move || {
        while !shutdown.is_requested() && !stop_thread.is_requested() {
            match server.recv_timeout(Duration::from_millis(100)) {
                Ok(Some(request)) => respond(request, &handle),
                Ok(None) => {}
                Err(e) => {
                    tracing::warn!(error = %e, "status server receive failed");
                    break;
                }
            }
        }
    })?;
    Ok(StatusServer { addr: local, stop, thread: Some(thread) })
}

fn respond(request: tiny_http::Request, handle: &StatusHandle) {
    let (status, content_type, body) = route(request.method(), request.url(), handle);
    let header = tiny_http::Header::from_bytes("Content-Type", content_type).expect("static header is valid");
    let response = tiny_http::Response::from_string(body).with_status_code(status).with_header(header);
    let _ = request.respond(response);
}

fn route(method: &tiny_http::Method, url: &str, handle: &StatusHandle) -> (u16, &'static str, String) {
    let path = url.split('?').next().unwrap_or(url);
    if *method != tiny_http::Method::Get {
        return (405, "text/plain", "method not allowed\n".into());
    }
    match path {
        "/healthz" if handle.is_alive() => (200, "text/plain", "ok".into()),
        "/healthz" => (503, "text/plain", "stopped".into()),
        "/status" => match serde_json::to_string(&*handle.snapshot()) {
            Ok(json) => (200, "application/json", json),
            Err(e) => (500, "text/plain", e.to_string()),
        },
        _ => (404, "text/plain", "not found\n".into()),
    }
}
