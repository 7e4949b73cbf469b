//! Static Kubernetes manifests for one repository: a manager Deployment with
//! a namespaced service account, and a runner Deployment it scales.

use serde_json::{json, Value};

use super::RunnerProfile;
use crate::policy::Policy;
use crate::repo::RepoCoordinates;

#[derive(Clone, Debug)]
pub struct ManifestInput {
    pub repo: RepoCoordinates,
    pub namespace: String,
    pub runner_deployment: String,
    pub manager_name: String,
    pub manager_image: String,
    pub runner_image: String,
    pub policy: Policy,
    /// Size of the runner's persistent volume, in bytes.
    pub persistent_size: u64,
    pub status_port: u16,
}

impl ManifestInput {
    pub fn new(repo: RepoCoordinates, namespace: &str, runner_deployment: &str) -> Self {
        Self {
            repo,
            namespace: namespace.into(),
            runner_deployment: runner_deployment.into(),
            manager_name: format!("{runner_deployment}-manager"),
            manager_image: "ghcr.io/example/runner-manager:latest".into(),
            runner_image: "ghcr.io/example/gpu-runner:latest".into(),
            policy: Policy::default(),
            persistent_size: 10 << 30,
            status_port: 8080,
        }
    }

    pub fn token_secret(&self) -> String {
        format!("{}-github-token", self.manager_name)
    }

    pub fn persistent_claim(&self) -> String {
        format!("{}-persistent", self.runner_deployment)
    }
}

/// Kubernetes quantity string for a byte count, using the largest exact
/// binary suffix.
pub fn format_quantity(bytes: u64) -> String {
    for (shift, suffix) in [(40, "Ti"), (30, "Gi"), (20, "Mi"), (10, "Ki")] {
        let unit = 1u64 << shift;
        if bytes >= unit && bytes.is_multiple_of(unit) {
            return format!("{}{suffix}", bytes / unit);
        }
    }
    bytes.to_string()
}

/// Parses "8Gi", "500Mi", "80G" or a plain byte count.
pub fn parse_quantity(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, suffix) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("{s:?} is not a quantity"))?;
    let mult: u64 = match suffix {
        "" => 1,
        "Ki" => 1 << 10,
        "Mi" => 1 << 20,
        "Gi" => 1 << 30,
        "Ti" => 1 << 40,
        "k" | "K" => 1_000,
        "M" => 1_000_000,
        "G" => 1_000_000_000,
        "T" => 1_000_000_000_000,
        _ => return Err(format!("{s:?} has unknown suffix {suffix:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("{s:?} overflows"))
}

fn secs(d: std::time::Duration) -> String {
    format!("{}s", d.as_secs())
}

/// Multi-document YAML. Output depends only on the inputs.
pub fn emit_manifests(input: &ManifestInput, profile: &RunnerProfile) -> String {
    let docs = [
        service_account(input),
        role(input),
        role_binding(input),
        token_secret(input),
        persistent_claim(input),
        runner_deployment(input, profile),
        manager_deployment(input),
    ];
    docs.iter().map(|d| serde_yaml::to_string(d).expect("manifest serializes")).collect::<Vec<_>>().join("---\n")
}

fn metadata(input: &ManifestInput, name: &str, app: &str) -> Value {
    json!({
        "name": name,
        "namespace": input.namespace,
        "labels": {"app": app, "app.kubernetes.io/part-of": "runner-manager"},
    })
}

fn service_account(input: &ManifestInput) -> Value {
    json!({
        "apiVersion": "v1",
        "kind": "ServiceAccount",
        "metadata": metadata(input, &input.manager_name, &input.manager_name),
    })
}

fn role(input: &ManifestInput) -> Value {
    json!({
        "apiVersion": "rbac.authorization.k8s.io/v1",
        "kind": "Role",
        "metadata": metadata(input, &input.manager_name, &input.manager_name),
        "rules": [
            {
                "apiGroups": ["apps"],
                "resources": ["deployments", "deployments/scale"],
                "resourceNames": [input.runner_deployment],
                "verbs": ["get", "patch"],
            },
            {
                "apiGroups": [""],
                "resources": ["pods"],
                "verbs": ["get", "list"],
            },
        ],
    })
}

fn role_binding(input: &ManifestInput) -> Value {
    json!({
        "apiVersion": "rbac.authorization.k8s.io/v1",
        "kind": "RoleBinding",
        "metadata": metadata(input, &input.manager_name, &input.manager_name),
        "roleRef": {
            "apiGroup": "rbac.authorization.k8s.io",
            "kind": "Role",
            "name": input.manager_name,
        },
        "subjects": [{
            "kind": "ServiceAccount",
            "name": input.manager_name,
            "namespace": input.namespace,
        }],
    })
}

fn token_secret(input: &ManifestInput) -> Value {
    json!({
        "apiVersion": "v1",
        "kind": "Secret",
        "metadata": metadata(input, &input.token_secret(), &input.manager_name),
        "type": "Opaque",
        "stringData": {"token": "REPLACE_WITH_FINE_GRAINED_TOKEN"},
    })
}

fn persistent_claim(input: &ManifestInput) -> Value {
    json!({
        "apiVersion": "v1",
        "kind": "PersistentVolumeClaim",
        "metadata": metadata(input, &input.persistent_claim(), &input.runner_deployment),
        "spec": {
            "accessModes": ["ReadWriteOnce"],
            "resources": {"requests": {"storage": format_quantity(input.persistent_size)}},
        },
    })
}

fn runner_deployment(input: &ManifestInput, profile: &RunnerProfile) -> Value {
    let mut resources = serde_json::Map::new();
    resources.insert("cpu".into(), json!(profile.cpu_request.to_string()));
    resources.insert("memory".into(), json!(format_quantity(profile.memory_request)));
    resources.insert("ephemeral-storage".into(), json!(format_quantity(profile.ephemeral_request)));
    if profile.gpu_request > 0 {
        resources.insert(profile.gpu_resource.clone(), json!(profile.gpu_request.to_string()));
    }
    let persistent = profile.persistent_dir.display().to_string();
    let work = profile.work_dir.display().to_string();
    json!({
        "apiVersion": "apps/v1",
        "kind": "Deployment",
        "metadata": metadata(input, &input.runner_deployment, &input.runner_deployment),
        "spec": {
            "replicas": 0,
            "strategy": {"type": "Recreate"},
            "selector": {"matchLabels": {"app": input.runner_deployment}},
            "template": {
                "metadata": {"labels": {"app": input.runner_deployment}},
                "spec": {
                    "terminationGracePeriodSeconds": 60,
                    "containers": [{
                        "name": "runner",
                        "image": input.runner_image,
                        "command": ["runner-bootstrap", "run", "--dir", persistent, "--work-dir", work],
                        "env": [{"name": "RUNNER_LABELS", "value": profile.labels.to_csv()}],
                        "resources": {"requests": resources.clone(), "limits": resources},
                        "volumeMounts": [
                            {"name": "persistent", "mountPath": persistent},
                            {"name": "work", "mountPath": work},
                        ],
                    }],
                    "volumes": [
                        {"name": "persistent", "persistentVolumeClaim": {"claimName": input.persistent_claim()}},
                        {"name": "work", "emptyDir": {"sizeLimit": format_quantity(profile.ephemeral_request)}},
                    ],
                },
            },
        },
    })
}

fn manager_deployment(input: &ManifestInput) -> Value {
    let p = &input.policy;
    let env = json!([
        {"name": "GH_OWNER", "value": input.repo.owner()},
        {"name": "GH_REPO", "value": input.repo.repo()},
        {"name": "RUNNER_LABELS", "value": p.runner_labels.to_csv()},
        {"name": "POLL_INTERVAL", "value": secs(p.poll_interval)},
        {"name": "FORCE_INTERVAL", "value": secs(p.force_interval)},
        {"name": "MIN_DWELL", "value": secs(p.min_dwell)},
        {"name": "MAX_RUNNERS", "value": p.max_runners.to_string()},
        {"name": "GITHUB_TOKEN_FILE", "value": "/secrets/github/token"},
        {"name": "KUBE_DEPLOYMENT", "value": input.runner_deployment},
        {"name": "KUBE_NAMESPACE", "valueFrom": {"fieldRef": {"fieldPath": "metadata.namespace"}}},
        {"name": "STATUS_ADDR", "value": format!("0.0.0.0:{}", input.status_port)},
    ]);
    json!({
        "apiVersion": "apps/v1",
        "kind": "Deployment",
        "metadata": metadata(input, &input.manager_name, &input.manager_name),
        "spec": {
            "replicas": 1,
            "selector": {"matchLabels": {"app": input.manager_name}},
            "template": {
                "metadata": {"labels": {"app": input.manager_name}},
                "spec": {
                    "serviceAccountName": input.manager_name,
                    "containers": [{
                        "name": "manager",
                        "image": input.manager_image,
                        "command": ["runner-manager"],
                        "env": env,
                        "ports": [{"name": "status", "containerPort": input.status_port}],
                        "livenessProbe": {"httpGet": {"path": "/healthz", "port": "status"}},
                        "resources": {"requests": {"cpu": "50m", "memory": "32Mi"}},
                        "volumeMounts": [{"name": "github-token", "mountPath": "/secrets/github", "readOnly": true}],
                    }],
                    "volumes": [{"name": "github-token", "secret": {"secretName": input.token_secret()}}],
                },
            },
        },
    })
}
