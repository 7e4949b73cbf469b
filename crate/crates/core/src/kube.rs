//! Namespaced Kubernetes access: the runner Deployment's scale subresource,
//! its annotations, and the runner pods. Nothing here touches a
//! cluster-scoped path.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{parse_rfc3339, Clock};
use crate::http::{HttpRequest, HttpResponse, Method, TlsRoots, Transport};
use crate::secret::SecretToken;

pub const DEFAULT_MOUNT_ROOT: &str = "/var/run/secrets/kubernetes.io/serviceaccount";
pub const MERGE_PATCH: &str = "application/merge-patch+json";

#[derive(Clone, Debug)]
pub struct KubeCredentials {
    pub api_base: String,
    pub bearer_token: SecretToken,
    pub tls_roots: TlsRoots,
    pub namespace: String,
}

#[derive(Debug, Error)]
pub enum CredentialsError {
    #[error("missing {0}")]
    Missing(String),
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn read_mounted(path: &Path) -> Result<Option<String>, CredentialsError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(CredentialsError::Unreadable { path: path.to_path_buf(), source }),
    }
}

/// Loads the service-account credentials mounted into the pod.
///
/// `api_override` replaces the in-cluster API address (pass `None` or
/// `"in-cluster"` to use `KUBERNETES_SERVICE_HOST`/`PORT`), and
/// `namespace_override` replaces the mounted namespace file. The token is
/// always read from the mount.
pub fn load_incluster_credentials(
    mount_root: &Path,
    env: &HashMap<String, String>,
    api_override: Option<&str>,
    namespace_override: Option<&str>,
) -> Result<KubeCredentials, CredentialsError> {
    let token_path = mount_root.join("token");
    let token = read_mounted(&token_path)?
        .map(|t| SecretToken::from_file_contents(&t))
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CredentialsError::Missing(format!("service account token {}", token_path.display())))?;

    let namespace = match namespace_override.filter(|n| !n.is_empty()) {
        Some(ns) => ns.to_string(),
        None => {
            let ns_path = mount_root.join("namespace");
            read_mounted(&ns_path)?
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| CredentialsError::Missing(format!("namespace file {}", ns_path.display())))?
        }
    };

    let in_cluster = matches!(api_override, None | Some("in-cluster") | Some(""));
    let api_base = if in_cluster {
        let host = env
            .get("KUBERNETES_SERVICE_HOST")
            .filter(|h| !h.is_empty())
            .ok_or_else(|| CredentialsError::Missing("environment variable KUBERNETES_SERVICE_HOST".into()))?;
        let port = env
            .get("KUBERNETES_SERVICE_PORT")
            .filter(|p| !p.is_empty())
            .ok_or_else(|| CredentialsError::Missing("environment variable KUBERNETES_SERVICE_PORT".into()))?;
        if host.contains(':') {
            format!("https://[{host}]:{port}")
        } else {
            format!("https://{host}:{port}")
        }
    } else {
        api_override.unwrap_or_default().trim_end_matches('/').to_string()
    };

    let ca_path = mount_root.join("ca.crt");
    let tls_roots = match read_mounted(&ca_path)? {
        Some(pem) => TlsRoots::Pem(pem.into_bytes()),
        None if in_cluster => return Err(CredentialsError::Missing(format!("CA bundle {}", ca_path.display()))),
        None => TlsRoots::WebPki,
    };

    Ok(KubeCredentials { api_base, bearer_token: token, tls_roots, namespace })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KubeError {
    #[error("deployment {0:?} not found in namespace")]
    MissingDeployment(String),
    #[error("Kubernetes rejected the service account token (HTTP {status})")]
    Credential { status: u16 },
    #[error("conflicting update, retry on next poll")]
    Conflict,
    #[error("transient Kubernetes failure: {0}")]
    Transient(String),
    #[error("unexpected Kubernetes response: {0}")]
    Protocol(String),
    #[error("refusing to scale to {requested} replicas (cap {cap})")]
    Precondition { requested: u32, cap: u32 },
}

impl KubeError {
    pub fn is_credential(&self) -> bool {
        matches!(self, KubeError::Credential { .. })
    }

    /// Errors that no amount of waiting will fix.
    pub fn is_fatal(&self) -> bool {
        matches!(self, KubeError::Credential { .. } | KubeError::MissingDeployment(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScaleSnapshot {
    /// Declared target.
    pub spec_replicas: u32,
    /// Currently realized count.
    pub status_replicas: u32,
    pub observed_at: DateTime<Utc>,
    pub resource_version: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PodPhase {
    Pending,
    Running,
    Succeeded,
    Failed,
    Unknown,
}

impl PodPhase {
    pub fn parse(s: &str) -> Self {
        match s {
            "Pending" => PodPhase::Pending,
            "Running" => PodPhase::Running,
            "Succeeded" => PodPhase::Succeeded,
            "Failed" => PodPhase::Failed,
            _ => PodPhase::Unknown,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PodInfo {
    pub name: String,
    pub phase: PodPhase,
    pub start_time: Option<DateTime<Utc>>,
}

pub struct KubeClient {
    transport: Arc<dyn Transport>,
    creds: KubeCredentials,
    clock: Arc<dyn Clock>,
    replica_cap: u32,
}

impl KubeClient {
    pub fn new(transport: Arc<dyn Transport>, creds: KubeCredentials, clock: Arc<dyn Clock>, replica_cap: u32) -> Self {
        Self { transport, creds, clock, replica_cap }
    }

    pub fn namespace(&self) -> &str {
        &self.creds.namespace
    }

    fn deployment_url(&self, deployment: &str) -> String {
        format!("{}/apis/apps/v1/namespaces/{}/deployments/{}", self.creds.api_base, self.creds.namespace, deployment)
    }

    fn send(&self, request: HttpRequest, deployment: &str) -> Result<Value, KubeError> {
        let request = request.with_header("Authorization", format!("Bearer {}", self.creds.bearer_token.expose()));
        let response = self.transport.send(&request).map_err(|e| KubeError::Transient(e.to_string()))?;
        classify(&response, deployment)?;
        serde_json::from_slice(&response.body).map_err(|e| KubeError::Protocol(format!("{}: {e}", request.path())))
    }

    pub fn read_scale(&self, deployment: &str) -> Result<ScaleSnapshot, KubeError> {
        let url = format!("{}/scale", self.deployment_url(deployment));
        let body =
            self.send(HttpRequest::new(Method::Get, url).with_header("Accept", "application/json"), deployment)?;
        self.parse_scale(&body)
    }

    /// Sets `spec.replicas` via a merge-patch on the scale subresource.
    /// Requests above the replica cap are rejected before any I/O.
    pub fn write_scale(&self, deployment: &str, replicas: u32) -> Result<ScaleSnapshot, KubeError> {
        if replicas > self.replica_cap {
            return Err(KubeError::Precondition { requested: replicas, cap: self.replica_cap });
        }
        let url = format!("{}/scale", self.deployment_url(deployment));
        let body = json!({"spec": {"replicas": replicas}});
        let request = HttpRequest::new(Method::Patch, url)
            .with_header("Accept", "application/json")
            .with_body(MERGE_PATCH, serde_json::to_vec(&body).expect("static json"));
        let body = self.send(request, deployment)?;
        self.parse_scale(&body)
    }

    pub fn read_annotations(&self, deployment: &str) -> Result<BTreeMap<String, String>, KubeError> {
        let body = self.send(
            HttpRequest::new(Method::Get, self.deployment_url(deployment)).with_header("Accept", "application/json"),
            deployment,
        )?;
        Ok(annotations_of(&body))
    }

    pub fn write_annotation(&self, deployment: &str, key: &str, value: &str) -> Result<(), KubeError> {
        self.patch_annotation(deployment, key, Value::String(value.to_string()))
    }

    /// Removes an annotation (merge-patch with `null`).
    pub fn remove_annotation(&self, deployment: &str, key: &str) -> Result<(), KubeError> {
        self.patch_annotation(deployment, key, Value::Null)
    }

    fn patch_annotation(&self, deployment: &str, key: &str, value: Value) -> Result<(), KubeError> {
        let body = json!({"metadata": {"annotations": {key: value}}});
        let request = HttpRequest::new(Method::Patch, self.deployment_url(deployment))
            .with_header("Accept", "application/json")
            .with_body(MERGE_PATCH, serde_json::to_vec(&body).expect("static json"));
        self.send(request, deployment).map(|_| ())
    }

    pub fn list_runner_pods(&self, label_selector: &str) -> Result<Vec<PodInfo>, KubeError> {
        let selector: String = url::form_urlencoded::byte_serialize(label_selector.as_bytes()).collect();
        let url =
            format!("{}/api/v1/namespaces/{}/pods?labelSelector={selector}", self.creds.api_base, self.creds.namespace);
        let body = self.send(HttpRequest::new(Method::Get, url).with_header("Accept", "application/json"), "")?;
        let items = body
            .get("items")
            .and_then(Value::as_array)
            .ok_or_else(|| KubeError::Protocol("pod list without items".into()))?;
        items
            .iter()
            .map(|item| {
                let name = item
                    .pointer("/metadata/name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| KubeError::Protocol("pod without name".into()))?;
                let phase = item
                    .pointer("/status/phase")
                    .and_then(Value::as_str)
                    .map(PodPhase::parse)
                    .unwrap_or(PodPhase::Unknown);
                let start_time = item.pointer("/status/startTime").and_then(Value::as_str).and_then(parse_rfc3339);
                Ok(PodInfo { name: name.to_string(), phase, start_time })
            })
            .collect()
    }

    fn parse_scale(&self, body: &Value) -> Result<ScaleSnapshot, KubeError> {
        // Zero replica counts are omitted from serialized Scale objects.
        let count = |ptr: &str| -> Result<u32, KubeError> {
            match body.pointer(ptr) {
                None | Some(Value::Null) => Ok(0),
                Some(v) => v
                    .as_u64()
                    .and_then(|n| u32::try_from(n).ok())
                    .ok_or_else(|| KubeError::Protocol(format!("{ptr} is not a replica count: {v}"))),
            }
        };
        if body.get("spec").is_none() && body.get("kind").and_then(Value::as_str) != Some("Scale") {
            return Err(KubeError::Protocol("response is not a Scale object".into()));
        }
        Ok(ScaleSnapshot {
            spec_replicas: count("/spec/replicas")?,
            status_replicas: count("/status/replicas")?,
            observed_at: self.clock.now(),
            resource_version: body
                .pointer("/metadata/resourceVersion")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
        })
    }
}

fn classify(response: &HttpResponse, deployment: &str) -> Result<(), KubeError> {
    match response.status {
        200..=299 => Ok(()),
        401 | 403 => Err(KubeError::Credential { status: response.status }),
        404 => Err(KubeError::MissingDeployment(deployment.to_string())),
        409 => Err(KubeError::Conflict),
        429 | 500..=599 => Err(KubeError::Transient(format!("HTTP {}", response.status))),
        s => Err(KubeError::Protocol(format!("HTTP {s}: {}", response.body_snippet()))),
    }
}

fn annotations_of(deployment: &Value) -> BTreeMap<String, String> {
    deployment
        .pointer("/metadata/annotations")
        .and_then(Value::as_object)
        .map(|m| m.iter().filter_map(|(k, v)| v.as_str().map(|v| (k.clone(), v.to_string()))).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::http::TransportError;
    use chrono::TimeZone;
    use std::sync::Mutex;

    struct Canned {
        response: HttpResponse,
        seen: Mutex<Vec<HttpRequest>>,
    }

    impl Transport for Canned {
        fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.seen.lock().unwrap().push(request.clone());
            Ok(self.response.clone())
        }
    }

    fn client(response: HttpResponse) -> (KubeClient, Arc<Canned>) {
        let canned = Arc::new(Canned { response, seen: Mutex::new(vec![]) });
        let creds = KubeCredentials {
            api_base: "http://kube".into(),
            bearer_token: SecretToken::new("sa-token"),
            tls_roots: TlsRoots::WebPki,
            namespace: "ci".into(),
        };
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()));
        (KubeClient::new(canned.clone(), creds, clock, 1), canned)
    }

    #[test]
    fn scale_omitting_zero_counts() {
        let (kube, seen) = client(HttpResponse::json(200, &json!({"kind": "Scale", "spec": {}, "status": {}})));
        let snap = kube.read_scale("runner").unwrap();
        assert_eq!((snap.spec_replicas, snap.status_replicas), (0, 0));
        let req = &seen.seen.lock().unwrap()[0];
        assert_eq!(req.url, "http://kube/apis/apps/v1/namespaces/ci/deployments/runner/scale");
        assert_eq!(req.header("authorization"), Some("Bearer sa-token"));
    }

    #[test]
    fn write_above_cap_makes_no_request() {
        let (kube, seen) = client(HttpResponse::new(200));
        let err = kube.write_scale("runner", 2).unwrap_err();
        assert_eq!(err, KubeError::Precondition { requested: 2, cap: 1 });
        assert!(seen.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn write_scale_wire_format() {
        let body = json!({"kind": "Scale", "spec": {"replicas": 1}, "status": {"replicas": 0}});
        let (kube, seen) = client(HttpResponse::json(200, &body));
        let snap = kube.write_scale("runner", 1).unwrap();
        assert_eq!((snap.spec_replicas, snap.status_replicas), (1, 0));
        let req = &seen.seen.lock().unwrap()[0];
        assert_eq!(req.method, Method::Patch);
        assert_eq!(req.header("content-type"), Some(MERGE_PATCH));
        assert_eq!(req.body, br#"{"spec":{"replicas":1}}"#);
    }

    #[test]
    fn status_mapping() {
        for (status, check) in [
            (404u16, (|e: &KubeError| matches!(e, KubeError::MissingDeployment(_))) as fn(&KubeError) -> bool),
            (401, |e| e.is_credential()),
            (403, |e| e.is_credential()),
            (409, |e| *e == KubeError::Conflict),
            (503, |e| matches!(e, KubeError::Transient(_))),
        ] {
            let (kube, _) = client(HttpResponse::new(status));
            let err = kube.read_scale("runner").unwrap_err();
            assert!(check(&err), "{status}: {err}");
        }
    }

    #[test]
    fn pod_selector_is_encoded() {
        let body = json!({"items": [{"metadata": {"name": "runner-1"}, "status": {"phase": "Running", "startTime": "2024-01-01T00:00:20Z"}}]});
        let (kube, seen) = client(HttpResponse::json(200, &body));
        let pods = kube.list_runner_pods("app=gpu-runner").unwrap();
        assert_eq!(pods.len(), 1);
        assert_eq!(pods[0].phase, PodPhase::Running);
        assert!(pods[0].start_time.is_some());
        assert_eq!(
            seen.seen.lock().unwrap()[0].url,
            "http://kube/api/v1/namespaces/ci/pods?labelSelector=app%3Dgpu-runner"
        );
    }

    #[test]
    fn annotation_patch_body() {
        let (kube, seen) = client(HttpResponse::json(200, &json!({"metadata": {}})));
        kube.write_annotation("runner", "runner-manager/last-active", "2024-01-01T00:00:00Z").unwrap();
        kube.remove_annotation("runner", "runner-manager/keepalive-started").unwrap();
        let seen = seen.seen.lock().unwrap();
        assert_eq!(
            seen[0].body,
            br#"{"metadata":{"annotations":{"runner-manager/last-active":"2024-01-01T00:00:00Z"}}}"#
        );
        assert_eq!(seen[1].body, br#"{"metadata":{"annotations":{"runner-manager/keepalive-started":null}}}"#);
    }

    fn mount(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, contents) in files {
            std::fs::write(dir.path().join(name), contents).unwrap();
        }
        dir
    }

    #[test]
    fn incluster_mount_echo() {
        let dir = mount(&[("token", "T\n"), ("namespace", "ci"), ("ca.crt", "PEM")]);
        let env: HashMap<String, String> = [
            ("KUBERNETES_SERVICE_HOST".to_string(), "10.0.0.1".to_string()),
            ("KUBERNETES_SERVICE_PORT".to_string(), "443".to_string()),
        ]
        .into();
        let creds = load_incluster_credentials(dir.path(), &env, None, None).unwrap();
        assert_eq!(creds.bearer_token.expose(), "T");
        assert_eq!(creds.namespace, "ci");
        assert_eq!(creds.api_base, "https://10.0.0.1:443");
        assert_eq!(creds.tls_roots, TlsRoots::Pem(b"PEM".to_vec()));
    }

    #[test]
    fn missing_namespace_file() {
        let dir = mount(&[("token", "T")]);
        let err = load_incluster_credentials(dir.path(), &HashMap::new(), Some("http://k"), None).unwrap_err();
        assert!(err.to_string().contains("namespace"), "{err}");
    }

    #[test]
    fn override_uses_mounted_token() {
        let dir = mount(&[("token", "T"), ("namespace", "ci")]);
        let creds = load_incluster_credentials(dir.path(), &HashMap::new(), Some("http://127.0.0.1:9/"), None).unwrap();
        assert_eq!(creds.api_base, "http://127.0.0.1:9");
        assert_eq!(creds.bearer_token.expose(), "T");
        assert_eq!(creds.tls_roots, TlsRoots::WebPki);
    }

    #[test]
    fn incluster_requires_service_env() {
        let dir = mount(&[("token", "T"), ("namespace", "ci"), ("ca.crt", "PEM")]);
        let err = load_incluster_credentials(dir.path(), &HashMap::new(), Some("in-cluster"), None).unwrap_err();
        assert!(err.to_string().contains("KUBERNETES_SERVICE_HOST"));
    }
}
