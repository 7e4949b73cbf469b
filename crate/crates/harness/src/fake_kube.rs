//! In-memory Kubernetes API for a single namespace: Deployment scale and
//! annotations, runner pods, and object creation with validation so example
//! manifests can be round-tripped.
//!
//! Every request outside the configured namespace, including cluster-scoped
//! paths, is answered 403 and recorded as a violation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runner_manager::clock::rfc3339;
use runner_manager::http::{HttpRequest, HttpResponse, Method};
use runner_manager::kube::MERGE_PATCH;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::scenario::{to_datetime, SimTime};
use crate::trace::Actor;
use crate::wire::{actor_of, Outbox, RequestLogEntry, WireReport};

#[derive(Clone, Debug)]
pub struct FakeKubeConfig {
    pub namespace: String,
    pub deployment: String,
    pub service_account_token: String,
    pub pod_startup_secs: u64,
    pub seed: u64,
    pub log_requests: bool,
}

impl Default for FakeKubeConfig {
    fn default() -> Self {
        Self {
            namespace: "ci".into(),
            deployment: "gpu-runner".into(),
            service_account_token: "sa-token-harness".into(),
            pod_startup_secs: 20,
            seed: 0,
            log_requests: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PodState {
    Pending,
    Running,
}

#[derive(Clone, Debug)]
pub struct FakePod {
    pub name: String,
    pub deployment: String,
    pub labels: BTreeMap<String, String>,
    pub created_at: SimTime,
    pub start_at: SimTime,
    pub state: PodState,
}

#[derive(Clone, Debug)]
struct FakeDeployment {
    spec_replicas: u32,
    labels: BTreeMap<String, String>,
    annotations: BTreeMap<String, String>,
    pod_labels: BTreeMap<String, String>,
    generation: u64,
    resource_version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScaleWrite {
    pub at: SimTime,
    pub deployment: String,
    pub from: u32,
    pub to: u32,
}

pub struct FakeKube {
    cfg: FakeKubeConfig,
    deployments: BTreeMap<String, FakeDeployment>,
    objects: BTreeMap<(String, String), Value>,
    pods: Vec<FakePod>,
    rng: ChaCha8Rng,
    fault: Option<u16>,
    resource_version: u64,
    namespace_violations: Vec<String>,
    wire: WireReport,
    scale_writes: Vec<ScaleWrite>,
    started: Vec<String>,
    stopped: Vec<String>,
    outbox: Outbox,
    log: Vec<RequestLogEntry>,
}

fn status(code: u16, reason: &str, message: &str) -> HttpResponse {
    HttpResponse::json(
        code,
        &json!({"kind": "Status", "apiVersion": "v1", "status": "Failure", "reason": reason, "message": message, "code": code}),
    )
}

const POD_SUFFIX: &[u8] = b"bcdfghjklmnpqrstvwxz2456789";

impl FakeKube {
    /// Starts with the runner Deployment at zero replicas carrying
    /// `annotations`.
    pub fn new(cfg: FakeKubeConfig, annotations: BTreeMap<String, String>) -> Self {
        let app: BTreeMap<String, String> = [("app".to_string(), cfg.deployment.clone())].into();
        let deployment = FakeDeployment {
            spec_replicas: 0,
            labels: app.clone(),
            annotations,
            pod_labels: app,
            generation: 1,
            resource_version: 1,
        };
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            deployments: [(cfg.deployment.clone(), deployment)].into(),
            cfg,
            objects: BTreeMap::new(),
            pods: Vec::new(),
            fault: None,
            resource_version: 1,
            namespace_violations: Vec::new(),
            wire: WireReport::default(),
            scale_writes: Vec::new(),
            started: Vec::new(),
            stopped: Vec::new(),
            outbox: Outbox::default(),
            log: Vec::new(),
        }
    }

    /// Starts empty; objects are created through the API.
    pub fn empty(cfg: FakeKubeConfig) -> Self {
        let mut k = Self::new(cfg, BTreeMap::new());
        k.deployments.clear();
        k
    }

    pub fn config(&self) -> &FakeKubeConfig {
        &self.cfg
    }

    pub fn namespace_violations(&self) -> &[String] {
        &self.namespace_violations
    }

    pub fn wire(&self) -> &WireReport {
        &self.wire
    }

    pub fn scale_writes(&self) -> &[ScaleWrite] {
        &self.scale_writes
    }

    pub fn request_log(&self) -> &[RequestLogEntry] {
        &self.log
    }

    pub fn pods(&self) -> &[FakePod] {
        &self.pods
    }

    pub fn object(&self, kind: &str, name: &str) -> Option<&Value> {
        self.objects.get(&(kind.to_string(), name.to_string()))
    }

    pub fn spec_replicas(&self, deployment: &str) -> Option<u32> {
        self.deployments.get(deployment).map(|d| d.spec_replicas)
    }

    pub fn annotations(&self, deployment: &str) -> Option<&BTreeMap<String, String>> {
        self.deployments.get(deployment).map(|d| &d.annotations)
    }

    pub fn running_pods(&self, deployment: &str) -> usize {
        self.pods.iter().filter(|p| p.deployment == deployment && p.state == PodState::Running).count()
    }

    pub fn set_fault(&mut self, status: Option<u16>, now: SimTime) {
        self.fault = status;
        let action = if status.is_some() { "fault_started" } else { "fault_cleared" };
        self.outbox.push(now, Actor::FakeKube, action, json!({"status": status}));
    }

    pub fn drain_outbox(&mut self) -> Vec<(SimTime, Actor, String, Value)> {
        self.outbox.drain()
    }

    /// Pods that became Running since the last call, in creation order.
    pub fn take_started(&mut self) -> Vec<String> {
        std::mem::take(&mut self.started)
    }

    /// Running pods deleted since the last call.
    pub fn take_stopped(&mut self) -> Vec<String> {
        std::mem::take(&mut self.stopped)
    }

    pub fn next_pod_start(&self) -> Option<SimTime> {
        self.pods.iter().filter(|p| p.state == PodState::Pending).map(|p| p.start_at).min()
    }

    /// Moves pods whose startup delay has elapsed to Running.
    pub fn advance(&mut self, now: SimTime) {
        for pod in &mut self.pods {
            if pod.state == PodState::Pending && pod.start_at <= now {
                pod.state = PodState::Running;
                self.started.push(pod.name.clone());
                self.outbox.push(pod.start_at, Actor::FakeKube, "pod_running", json!({"pod": pod.name}));
            }
        }
    }

    fn bump(&mut self) -> u64 {
        self.resource_version += 1;
        self.resource_version
    }

    fn pod_name(&mut self, deployment: &str) -> String {
        let suffix: String = (0..5).map(|_| POD_SUFFIX[self.rng.gen_range(0..POD_SUFFIX.len())] as char).collect();
        format!("{deployment}-6b7f9c8d5-{suffix}")
    }

    fn apply_replicas(&mut self, name: &str, replicas: u32, now: SimTime) {
        let (from, pod_labels) = {
            let d = self.deployments.get_mut(name).expect("deployment exists");
            let from = d.spec_replicas;
            d.spec_replicas = replicas;
            d.generation += 1;
            (from, d.pod_labels.clone())
        };
        let rv = self.bump();
        self.deployments.get_mut(name).expect("deployment exists").resource_version = rv;
        self.scale_writes.push(ScaleWrite { at: now, deployment: name.to_string(), from, to: replicas });
        self.outbox.push(
            now,
            Actor::FakeKube,
            "scale_write",
            json!({"deployment": name, "from": from, "to": replicas}),
        );

        let mut current = self.pods.iter().filter(|p| p.deployment == name).count() as u32;
        while current < replicas {
            let pod_name = self.pod_name(name);
            self.outbox.push(now, Actor::FakeKube, "pod_created", json!({"pod": pod_name}));
            self.pods.push(FakePod {
                name: pod_name,
                deployment: name.to_string(),
                labels: pod_labels.clone(),
                created_at: now,
                start_at: now + self.cfg.pod_startup_secs as SimTime,
                state: PodState::Pending,
            });
            current += 1;
        }
        while current > replicas {
            let victim = self
                .pods
                .iter()
                .rposition(|p| p.deployment == name && p.state == PodState::Pending)
                .or_else(|| self.pods.iter().rposition(|p| p.deployment == name))
                .expect("pod count is positive");
            let pod = self.pods.remove(victim);
            if pod.state == PodState::Running {
                self.stopped.push(pod.name.clone());
            }
            self.outbox.push(now, Actor::FakeKube, "pod_deleted", json!({"pod": pod.name, "state": pod.state}));
            current -= 1;
        }
    }

    pub fn handle(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        self.advance(now);
        let response = self.route(req, now);
        if self.cfg.log_requests {
            self.log.push(RequestLogEntry::new(now, actor_of(req), req, response.status));
        }
        response
    }

    fn route(&mut self, req: &HttpRequest, now: SimTime) -> HttpResponse {
        let path = req.path().to_string();
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        let (group, rest) = match segments.as_slice() {
            ["api", "v1", "namespaces", ns, rest @ ..] if !rest.is_empty() => (("", "v1", *ns), rest.to_vec()),
            ["apis", g, v, "namespaces", ns, rest @ ..] if !rest.is_empty() => ((*g, *v, *ns), rest.to_vec()),
            _ => {
                let msg = format!("{} {} is cluster-scoped", req.method.as_str(), path);
                self.namespace_violations.push(msg.clone());
                self.outbox.push(now, Actor::FakeKube, "namespace_violation", json!({"request": msg}));
                return status(403, "Forbidden", &msg);
            }
        };
        let (api_group, version, namespace) = group;
        if namespace != self.cfg.namespace {
            let msg = format!("{} {} is outside namespace {}", req.method.as_str(), path, self.cfg.namespace);
            self.namespace_violations.push(msg.clone());
            self.outbox.push(now, Actor::FakeKube, "namespace_violation", json!({"request": msg}));
            return status(403, "Forbidden", &msg);
        }
        let expected = format!("Bearer {}", self.cfg.service_account_token);
        if req.header("authorization") != Some(expected.as_str()) {
            return status(401, "Unauthorized", "Unauthorized");
        }
        if let Some(code) = self.fault {
            return status(code, "InternalError", "injected fault");
        }
        self.wire.requests += 1;
        match (req.method, api_group, version, rest.as_slice()) {
            (Method::Get, "apps", "v1", ["deployments", name, "scale"]) => self.get_scale(name),
            (Method::Patch, "apps", "v1", ["deployments", name, "scale"]) => self.patch_scale(req, name, now),
            (Method::Get, "apps", "v1", ["deployments", name]) => self.get_deployment(name),
            (Method::Patch, "apps", "v1", ["deployments", name]) => self.patch_deployment(req, name, now),
            (Method::Put, "apps", "v1", ["deployments", ..]) => {
                self.wire.violation(format!("PUT {path}: replicas must change through the scale subresource"));
                status(405, "MethodNotAllowed", "use the scale subresource")
            }
            (Method::Get, "", "v1", ["pods"]) => self.list_pods(req),
            (Method::Post, g, v, [resource]) => self.create(req, g, v, resource, now),
            _ => status(404, "NotFound", &format!("{path} not found")),
        }
    }

    fn scale_json(&self, name: &str, d: &FakeDeployment) -> Value {
        let mut spec = Map::new();
        if d.spec_replicas > 0 {
            spec.insert("replicas".into(), json!(d.spec_replicas));
        }
        let selector = d.pod_labels.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
        json!({
            "kind": "Scale",
            "apiVersion": "autoscaling/v1",
            "metadata": {"name": name, "namespace": self.cfg.namespace, "resourceVersion": d.resource_version.to_string()},
            "spec": spec,
            "status": {"replicas": self.running_pods(name), "selector": selector},
        })
    }

    fn get_scale(&self, name: &str) -> HttpResponse {
        match self.deployments.get(name) {
            Some(d) => HttpResponse::json(200, &self.scale_json(name, d)),
            None => status(404, "NotFound", &format!("deployments.apps \"{name}\" not found")),
        }
    }

    fn patch_scale(&mut self, req: &HttpRequest, name: &str, now: SimTime) -> HttpResponse {
        if !self.deployments.contains_key(name) {
            return status(404, "NotFound", &format!("deployments.apps \"{name}\" not found"));
        }
        if req.header("content-type") != Some(MERGE_PATCH) {
            self.wire.violation(format!("scale patch with content type {:?}", req.header("content-type")));
            return status(415, "UnsupportedMediaType", "expected merge patch");
        }
        let replicas = serde_json::from_slice::<Value>(&req.body).ok().and_then(|v| {
            let obj = v.as_object()?;
            let spec = obj.get("spec")?.as_object()?;
            if obj.len() != 1 || spec.len() != 1 {
                return None;
            }
            u32::try_from(spec.get("replicas")?.as_u64()?).ok()
        });
        let Some(replicas) = replicas else {
            self.wire.violation(format!("scale patch body {:?}", String::from_utf8_lossy(&req.body)));
            return status(422, "Invalid", "scale patch must be {\"spec\":{\"replicas\":N}}");
        };
        self.apply_replicas(name, replicas, now);
        HttpResponse::json(200, &self.scale_json(name, &self.deployments[name]))
    }

    fn deployment_json(&self, name: &str, d: &FakeDeployment) -> Value {
        let running = self.running_pods(name);
        json!({
            "apiVersion": "apps/v1",
            "kind": "Deployment",
            "metadata": {
                "name": name,
                "namespace": self.cfg.namespace,
                "labels": d.labels,
                "annotations": d.annotations,
                "generation": d.generation,
                "resourceVersion": d.resource_version.to_string(),
            },
            "spec": {
                "replicas": d.spec_replicas,
                "selector": {"matchLabels": d.pod_labels},
                "template": {"metadata": {"labels": d.pod_labels}},
            },
            "status": {"replicas": running, "readyReplicas": running, "availableReplicas": running},
        })
    }

    fn get_deployment(&self, name: &str) -> HttpResponse {
        match self.deployments.get(name) {
            Some(d) => HttpResponse::json(200, &self.deployment_json(name, d)),
            None => status(404, "NotFound", &format!("deployments.apps \"{name}\" not found")),
        }
    }

    /// Only `metadata.annotations` may be patched here; replica changes
    /// must use the scale subresource.
    fn patch_deployment(&mut self, req: &HttpRequest, name: &str, now: SimTime) -> HttpResponse {
        if !self.deployments.contains_key(name) {
            return status(404, "NotFound", &format!("deployments.apps \"{name}\" not found"));
        }
        if req.header("content-type") != Some(MERGE_PATCH) {
            self.wire.violation(format!("deployment patch with content type {:?}", req.header("content-type")));
            return status(415, "UnsupportedMediaType", "expected merge patch");
        }
        let Ok(Value::Object(patch)) = serde_json::from_slice::<Value>(&req.body) else {
            return status(400, "BadRequest", "patch body is not a JSON object");
        };
        if patch.keys().any(|k| k != "metadata") {
            self.wire.violation(format!("deployment patch touches {:?}", patch.keys().collect::<Vec<_>>()));
            return status(422, "Invalid", "only metadata.annotations may be patched");
        }
        let meta = patch.get("metadata").and_then(Value::as_object).cloned().unwrap_or_default();
        if meta.keys().any(|k| k != "annotations") {
            return status(422, "Invalid", "only metadata.annotations may be patched");
        }
        let changes = meta.get("annotations").and_then(Value::as_object).cloned().unwrap_or_default();
        let rv = self.bump();
        let d = self.deployments.get_mut(name).expect("checked above");
        for (k, v) in &changes {
            match v {
                Value::Null => {
                    d.annotations.remove(k);
                }
                Value::String(s) => {
                    d.annotations.insert(k.clone(), s.clone());
                }
                other => return status(422, "Invalid", &format!("annotation {k} must be a string, got {other}")),
            }
        }
        d.resource_version = rv;
        self.outbox.push(now, Actor::FakeKube, "annotations_patched", Value::Object(changes));
        HttpResponse::json(200, &self.deployment_json(name, &self.deployments[name]))
    }

    fn list_pods(&self, req: &HttpRequest) -> HttpResponse {
        let selector = match req.query("labelSelector").map(|s| parse_selector(&s)).transpose() {
            Ok(s) => s.unwrap_or_default(),
            Err(e) => return status(400, "BadRequest", &e),
        };
        let items: Vec<Value> = self
            .pods
            .iter()
            .filter(|p| selector.iter().all(|term| term.matches(&p.labels)))
            .map(|p| {
                let mut st = Map::new();
                st.insert(
                    "phase".into(),
                    json!(match p.state {
                        PodState::Pending => "Pending",
                        PodState::Running => "Running",
                    }),
                );
                if p.state == PodState::Running {
                    st.insert("startTime".into(), json!(rfc3339(to_datetime(p.start_at))));
                }
                json!({
                    "metadata": {
                        "name": p.name,
                        "namespace": self.cfg.namespace,
                        "labels": p.labels,
                        "creationTimestamp": rfc3339(to_datetime(p.created_at)),
                    },
                    "status": st,
                })
            })
            .collect();
        HttpResponse::json(200, &json!({"kind": "PodList", "apiVersion": "v1", "items": items}))
    }

    fn create(&mut self, req: &HttpRequest, group: &str, version: &str, resource: &str, now: SimTime) -> HttpResponse {
        let Some((api_version, kind)) = resource_kind(group, version, resource) else {
            return status(404, "NotFound", &format!("unknown resource {resource}"));
        };
        let Ok(mut obj) = serde_json::from_slice::<Value>(&req.body) else {
            return status(400, "BadRequest", "body is not JSON");
        };
        if let Err(e) = validate_object(&obj, api_version, kind, &self.cfg.namespace, |k, n| {
            self.objects.contains_key(&(k.to_string(), n.to_string()))
        }) {
            return status(422, "Invalid", &format!("{kind} is invalid: {e}"));
        }
        let name = obj["metadata"]["name"].as_str().unwrap_or_default().to_string();
        let key = (kind.to_string(), name.clone());
        if self.objects.contains_key(&key) {
            return status(409, "AlreadyExists", &format!("{kind} \"{name}\" already exists"));
        }
        let rv = self.bump();
        let meta = obj["metadata"].as_object_mut().expect("validated");
        meta.insert("namespace".into(), json!(self.cfg.namespace));
        meta.insert("resourceVersion".into(), json!(rv.to_string()));
        meta.insert("creationTimestamp".into(), json!(rfc3339(to_datetime(now))));
        if kind == "Deployment" {
            let labels = string_map(&obj["metadata"]["labels"]);
            let annotations = string_map(&obj["metadata"]["annotations"]);
            let pod_labels = string_map(&obj["spec"]["template"]["metadata"]["labels"]);
            let replicas = obj["spec"]["replicas"].as_u64().unwrap_or(1) as u32;
            self.deployments.insert(
                name.clone(),
                FakeDeployment {
                    spec_replicas: 0,
                    labels,
                    annotations,
                    pod_labels,
                    generation: 1,
                    resource_version: rv,
                },
            );
            if replicas > 0 {
                self.apply_replicas(&name, replicas, now);
            }
        }
        self.outbox.push(now, Actor::FakeKube, "object_created", json!({"kind": kind, "name": name}));
        self.objects.insert(key, obj.clone());
        HttpResponse::json(201, &obj)
    }
}

fn string_map(v: &Value) -> BTreeMap<String, String> {
    v.as_object()
        .map(|m| m.iter().filter_map(|(k, v)| Some((k.clone(), v.as_str()?.to_string()))).collect())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum SelectorTerm {
    Eq(String, String),
    Ne(String, String),
}

impl SelectorTerm {
    fn matches(&self, labels: &BTreeMap<String, String>) -> bool {
        match self {
            SelectorTerm::Eq(k, v) => labels.get(k) == Some(v),
            SelectorTerm::Ne(k, v) => labels.get(k) != Some(v),
        }
    }
}

fn parse_selector(s: &str) -> Result<Vec<SelectorTerm>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|term| {
            let term = term.trim();
            if let Some((k, v)) = term.split_once("!=") {
                Ok(SelectorTerm::Ne(k.trim().into(), v.trim().into()))
            } else if let Some((k, v)) = term.split_once("==").or_else(|| term.split_once('=')) {
                Ok(SelectorTerm::Eq(k.trim().into(), v.trim().into()))
            } else {
                Err(format!("unsupported label selector term {term:?}"))
            }
        })
        .collect()
}

fn resource_kind(group: &str, version: &str, resource: &str) -> Option<(&'static str, &'static str)> {
    Some(match (group, version, resource) {
        ("apps", "v1", "deployments") => ("apps/v1", "Deployment"),
        ("", "v1", "serviceaccounts") => ("v1", "ServiceAccount"),
        ("", "v1", "secrets") => ("v1", "Secret"),
        ("", "v1", "persistentvolumeclaims") => ("v1", "PersistentVolumeClaim"),
        ("rbac.authorization.k8s.io", "v1", "roles") => ("rbac.authorization.k8s.io/v1", "Role"),
        ("rbac.authorization.k8s.io", "v1", "rolebindings") => ("rbac.authorization.k8s.io/v1", "RoleBinding"),
        _ => return None,
    })
}

/// The REST path under which objects of `kind` are created.
pub fn collection_path(namespace: &str, kind: &str) -> Option<String> {
    let (prefix, resource) = match kind {
        "Deployment" => ("apis/apps/v1", "deployments"),
        "ServiceAccount" => ("api/v1", "serviceaccounts"),
        "Secret" => ("api/v1", "secrets"),
        "PersistentVolumeClaim" => ("api/v1", "persistentvolumeclaims"),
        "Role" => ("apis/rbac.authorization.k8s.io/v1", "roles"),
        "RoleBinding" => ("apis/rbac.authorization.k8s.io/v1", "rolebindings"),
        _ => return None,
    };
    Some(format!("/{prefix}/namespaces/{namespace}/{resource}"))
}

fn is_dns_subdomain(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 253
        && s.split('.').all(|part| {
            !part.is_empty()
                && part.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
                && !part.starts_with('-')
                && !part.ends_with('-')
        })
}

fn is_dns_label(s: &str) -> bool {
    s.len() <= 63 && !s.contains('.') && is_dns_subdomain(s)
}

fn is_label_value(s: &str) -> bool {
    s.len() <= 63
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b))
        && s.bytes().next().is_none_or(|b| b.is_ascii_alphanumeric())
        && s.bytes().last().is_none_or(|b| b.is_ascii_alphanumeric())
}

/// Kubernetes resource quantity syntax, e.g. "4", "500m", "8Gi", "1e3".
pub fn is_quantity(s: &str) -> bool {
    let s = s.strip_prefix(['+', '-']).unwrap_or(s);
    let num_end = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, suffix) = s.split_at(num_end);
    let valid_num = !num.is_empty() && num != "." && num.matches('.').count() <= 1;
    let valid_suffix =
        matches!(suffix, "" | "m" | "k" | "M" | "G" | "T" | "P" | "E" | "Ki" | "Mi" | "Gi" | "Ti" | "Pi" | "Ei")
            || (suffix.len() > 1
                && (suffix.starts_with('e') || suffix.starts_with('E'))
                && suffix[1..].strip_prefix(['+', '-']).unwrap_or(&suffix[1..]).bytes().all(|b| b.is_ascii_digit())
                && !suffix[1..].strip_prefix(['+', '-']).unwrap_or(&suffix[1..]).is_empty());
    valid_num && valid_suffix
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Structural validation roughly matching what the API server enforces for
/// the kinds the example manifests use.
pub fn validate_object(
    obj: &Value,
    api_version: &str,
    kind: &str,
    namespace: &str,
    exists: impl Fn(&str, &str) -> bool,
) -> Result<(), String> {
    check(obj["apiVersion"] == api_version, || format!("apiVersion must be {api_version}"))?;
    check(obj["kind"] == kind, || format!("kind must be {kind}"))?;
    let meta = obj["metadata"].as_object().ok_or("metadata is required")?;
    let name = meta.get("name").and_then(Value::as_str).unwrap_or_default();
    check(is_dns_subdomain(name), || format!("metadata.name {name:?} is not a DNS subdomain"))?;
    if let Some(ns) = meta.get("namespace") {
        check(ns == namespace, || format!("metadata.namespace {ns} does not match {namespace}"))?;
    }
    for field in ["labels", "annotations"] {
        if let Some(m) = meta.get(field) {
            let m = m.as_object().ok_or_else(|| format!("metadata.{field} must be a map"))?;
            for (k, v) in m {
                let v = v.as_str().ok_or_else(|| format!("metadata.{field}.{k} must be a string"))?;
                if field == "labels" {
                    check(is_label_value(v), || format!("label {k}={v:?} is invalid"))?;
                }
            }
        }
    }
    match kind {
        "Deployment" => validate_deployment(obj, &exists),
        "Secret" => {
            for field in ["data", "stringData"] {
                if let Some(m) = obj.get(field) {
                    let m = m.as_object().ok_or_else(|| format!("{field} must be a map"))?;
                    check(m.values().all(Value::is_string), || format!("{field} values must be strings"))?;
                }
            }
            Ok(())
        }
        "PersistentVolumeClaim" => {
            let modes = obj["spec"]["accessModes"].as_array().ok_or("spec.accessModes is required")?;
            check(!modes.is_empty(), || "spec.accessModes must not be empty".into())?;
            let storage = obj["spec"]["resources"]["requests"]["storage"].as_str().unwrap_or_default();
            check(is_quantity(storage), || format!("storage request {storage:?} is not a quantity"))
        }
        "Role" => {
            let rules = obj["rules"].as_array().ok_or("rules is required")?;
            for rule in rules {
                check(rule["verbs"].as_array().is_some_and(|v| !v.is_empty()), || "every rule needs verbs".into())?;
                check(rule["apiGroups"].is_array() && rule["resources"].is_array(), || {
                    "every rule needs apiGroups and resources".into()
                })?;
            }
            Ok(())
        }
        "RoleBinding" => {
            let role_ref = &obj["roleRef"];
            check(role_ref["apiGroup"] == "rbac.authorization.k8s.io", || "roleRef.apiGroup is wrong".into())?;
            check(role_ref["kind"] == "Role" || role_ref["kind"] == "ClusterRole", || "roleRef.kind is wrong".into())?;
            check(role_ref["name"].as_str().is_some_and(is_dns_subdomain), || "roleRef.name is invalid".into())?;
            let subjects = obj["subjects"].as_array().ok_or("subjects is required")?;
            check(!subjects.is_empty(), || "subjects must not be empty".into())
        }
        _ => Ok(()),
    }
}

fn validate_deployment(obj: &Value, exists: &impl Fn(&str, &str) -> bool) -> Result<(), String> {
    let spec = &obj["spec"];
    if let Some(r) = spec.get("replicas") {
        check(r.as_u64().is_some(), || "spec.replicas must be a non-negative integer".into())?;
    }
    let selector = spec["selector"]["matchLabels"].as_object().ok_or("spec.selector.matchLabels is required")?;
    check(!selector.is_empty(), || "spec.selector.matchLabels must not be empty".into())?;
    let template_labels = spec["template"]["metadata"]["labels"].as_object().ok_or("template labels are required")?;
    for (k, v) in selector {
        check(template_labels.get(k) == Some(v), || format!("selector {k}={v} does not match template labels"))?;
    }
    let pod = &spec["template"]["spec"];
    if let Some(sa) = pod.get("serviceAccountName").and_then(Value::as_str) {
        check(exists("ServiceAccount", sa), || format!("service account {sa:?} does not exist"))?;
    }
    let volumes: Vec<&str> =
        pod["volumes"].as_array().map(|v| v.iter().filter_map(|v| v["name"].as_str()).collect()).unwrap_or_default();
    for v in pod["volumes"].as_array().into_iter().flatten() {
        if let Some(claim) = v["persistentVolumeClaim"]["claimName"].as_str() {
            check(exists("PersistentVolumeClaim", claim), || format!("claim {claim:?} does not exist"))?;
        }
        if let Some(secret) = v["secret"]["secretName"].as_str() {
            check(exists("Secret", secret), || format!("secret {secret:?} does not exist"))?;
        }
        if let Some(limit) = v["emptyDir"]["sizeLimit"].as_str() {
            check(is_quantity(limit), || format!("sizeLimit {limit:?} is not a quantity"))?;
        }
    }
    let containers = pod["containers"].as_array().ok_or("containers are required")?;
    check(!containers.is_empty(), || "at least one container is required".into())?;
    for c in containers {
        let name = c["name"].as_str().unwrap_or_default();
        check(is_dns_label(name), || format!("container name {name:?} is invalid"))?;
        check(c["image"].as_str().is_some_and(|i| !i.is_empty()), || format!("container {name} needs an image"))?;
        for m in c["volumeMounts"].as_array().into_iter().flatten() {
            let v = m["name"].as_str().unwrap_or_default();
            check(volumes.contains(&v), || format!("volume mount {v:?} has no volume"))?;
            check(m["mountPath"].as_str().is_some_and(|p| p.starts_with('/')), || "mountPath must be absolute".into())?;
        }
        for e in c["env"].as_array().into_iter().flatten() {
            check(e["name"].as_str().is_some_and(|n| !n.is_empty()), || "env entries need a name".into())?;
        }
        let requests = c["resources"]["requests"].as_object();
        let limits = c["resources"]["limits"].as_object();
        for (which, map) in [("requests", requests), ("limits", limits)] {
            for (k, v) in map.into_iter().flatten() {
                let q = v.as_str().unwrap_or_default();
                check(is_quantity(q), || format!("{which}.{k} {v} is not a quantity"))?;
            }
        }
        for (k, v) in requests.into_iter().flatten() {
            let extended = k.contains('/') && !k.starts_with("kubernetes.io/");
            if extended {
                check(limits.and_then(|l| l.get(k)) == Some(v), || {
                    format!("extended resource {k} needs equal request and limit")
                })?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kube() -> FakeKube {
        FakeKube::new(FakeKubeConfig::default(), BTreeMap::new())
    }

    fn req(method: Method, path: &str) -> HttpRequest {
        HttpRequest::new(method, format!("http://kube{path}")).with_header("Authorization", "Bearer sa-token-harness")
    }

    fn scale_patch(n: u32) -> HttpRequest {
        req(Method::Patch, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale")
            .with_body(MERGE_PATCH, format!("{{\"spec\":{{\"replicas\":{n}}}}}").into_bytes())
    }

    fn body(r: &HttpResponse) -> Value {
        serde_json::from_slice(&r.body).unwrap()
    }

    #[test]
    fn scale_up_runs_pod_after_delay() {
        let mut k = kube();
        assert_eq!(k.handle(&scale_patch(1), 100).status, 200);
        let pods = |k: &mut FakeKube, t| {
            body(&k.handle(&req(Method::Get, "/api/v1/namespaces/ci/pods?labelSelector=app%3Dgpu-runner"), t))
        };
        assert_eq!(pods(&mut k, 110)["items"][0]["status"]["phase"], "Pending");
        assert_eq!(pods(&mut k, 120)["items"][0]["status"]["phase"], "Running");
        assert_eq!(k.take_started().len(), 1);
        let scale = body(&k.handle(&req(Method::Get, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale"), 121));
        assert_eq!(scale["spec"]["replicas"], 1);
        assert_eq!(scale["status"]["replicas"], 1);
    }

    #[test]
    fn scale_to_current_value_has_no_churn() {
        let mut k = kube();
        k.handle(&scale_patch(1), 0);
        k.advance(30);
        let before: Vec<String> = k.pods().iter().map(|p| p.name.clone()).collect();
        assert_eq!(k.handle(&scale_patch(1), 40).status, 200);
        let after: Vec<String> = k.pods().iter().map(|p| p.name.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn scale_down_removes_pending_first() {
        let mut k = kube();
        k.handle(&scale_patch(1), 0);
        k.advance(20);
        k.handle(&scale_patch(2), 30);
        k.handle(&scale_patch(1), 31);
        assert_eq!(k.pods().len(), 1);
        assert_eq!(k.pods()[0].state, PodState::Running);
        assert!(k.take_stopped().is_empty());
        k.handle(&scale_patch(0), 32);
        assert_eq!(k.take_stopped().len(), 1);
    }

    #[test]
    fn other_namespace_is_forbidden_and_flagged() {
        let mut k = kube();
        let r = k.handle(&req(Method::Get, "/apis/apps/v1/namespaces/kube-system/deployments/x"), 0);
        assert_eq!(r.status, 403);
        let r = k.handle(&req(Method::Get, "/api/v1/nodes"), 0);
        assert_eq!(r.status, 403);
        assert_eq!(k.namespace_violations().len(), 2);
    }

    #[test]
    fn annotation_patch_merges_and_removes() {
        let mut k = kube();
        let patch = |v: &str| {
            req(Method::Patch, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner")
                .with_body(MERGE_PATCH, v.as_bytes().to_vec())
        };
        assert_eq!(k.handle(&patch(r#"{"metadata":{"annotations":{"a":"1","b":"2"}}}"#), 0).status, 200);
        assert_eq!(k.handle(&patch(r#"{"metadata":{"annotations":{"a":null}}}"#), 0).status, 200);
        assert_eq!(k.annotations("gpu-runner").unwrap().keys().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(k.handle(&patch(r#"{"spec":{"replicas":1}}"#), 0).status, 422);
        assert_eq!(k.wire().violation_count, 1);
        assert_eq!(k.spec_replicas("gpu-runner"), Some(0));
    }

    #[test]
    fn scale_patch_shape_is_enforced() {
        let mut k = kube();
        let bad = req(Method::Patch, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale")
            .with_body("application/json", br#"{"spec":{"replicas":1}}"#.to_vec());
        assert_eq!(k.handle(&bad, 0).status, 415);
        let bad = req(Method::Patch, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale")
            .with_body(MERGE_PATCH, br#"{"spec":{"replicas":1},"status":{}}"#.to_vec());
        assert_eq!(k.handle(&bad, 0).status, 422);
        assert_eq!(k.wire().violation_count, 2);
    }

    #[test]
    fn faults_and_auth() {
        let mut k = kube();
        k.set_fault(Some(503), 0);
        assert_eq!(
            k.handle(&req(Method::Get, "/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale"), 0).status,
            503
        );
        k.set_fault(None, 1);
        let anon = HttpRequest::new(Method::Get, "http://kube/apis/apps/v1/namespaces/ci/deployments/gpu-runner/scale");
        assert_eq!(k.handle(&anon, 1).status, 401);
    }

    #[test]
    fn quantities() {
        for ok in ["4", "500m", "8Gi", "80Gi", "1.5", "1e3", "10M"] {
            assert!(is_quantity(ok), "{ok}");
        }
        for bad in ["", "8GB", "Gi", "1..2", "four", "8 Gi"] {
            assert!(!is_quantity(bad), "{bad}");
        }
    }

    #[test]
    fn selector_terms() {
        let labels: BTreeMap<String, String> = [("app".to_string(), "x".to_string())].into();
        let s = parse_selector("app=x").unwrap();
        assert!(s.iter().all(|t| t.matches(&labels)));
        let s = parse_selector("app!=x").unwrap();
        assert!(!s.iter().all(|t| t.matches(&labels)));
        assert!(parse_selector("app in (x)").is_err());
    }
}
