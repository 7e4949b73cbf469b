//! Configuration from command-line flags and environment variables.
//! Precedence is flags, then environment, then defaults.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Parser;
use thiserror::Error;

use crate::github::DEFAULT_API_BASE;
use crate::kube::DEFAULT_MOUNT_ROOT;
use crate::labels::LabelSet;
use crate::policy::{Policy, PolicyError};
use crate::repo::{RepoCoordinates, RepoError};
use crate::secret::SecretToken;

pub const IN_CLUSTER: &str = "in-cluster";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required setting {0}")]
    Missing(&'static str),
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("cannot read token file {path}: {source}")]
    TokenFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("token file {0} is empty")]
    EmptyToken(PathBuf),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Usage(#[from] clap::Error),
}

/// Where the GitHub credential came from. Only the location is kept
/// for diagnostics; the value lives in [`Config::github_token`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenSource {
    File(PathBuf),
    Env(&'static str),
}

#[derive(Clone, Debug)]
pub struct Config {
    pub repo: RepoCoordinates,
    pub policy: Policy,
    pub github_api_base: String,
    pub github_token_source: TokenSource,
    pub github_token: SecretToken,
    pub kube_namespace: String,
    pub kube_deployment: String,
    /// Either [`IN_CLUSTER`] or an explicit API server URL.
    pub kube_api_base: String,
    pub kube_mount_root: PathBuf,
    pub pod_selector: String,
    pub status_listen_address: Option<SocketAddr>,
}

#[derive(Parser, Debug, Default)]
#[command(name = "runner-manager", version, about = "Scales a self-hosted GitHub Actions runner Deployment on demand")]
struct Flags {
    /// Repository owner (GH_OWNER).
    #[arg(long)]
    owner: Option<String>,
    /// Repository name (GH_REPO).
    #[arg(long)]
    repo: Option<String>,
    /// Comma-separated labels the runner advertises (RUNNER_LABELS).
    #[arg(long)]
    labels: Option<String>,
    /// Poll period, e.g. "60s" or "1m" (POLL_INTERVAL).
    #[arg(long)]
    poll_interval: Option<String>,
    /// Idle time after which a runner is forced up (FORCE_INTERVAL).
    #[arg(long)]
    force_interval: Option<String>,
    /// Minimum lifetime of a forced runner (MIN_DWELL).
    #[arg(long)]
    min_dwell: Option<String>,
    /// Replica cap (MAX_RUNNERS).
    #[arg(long)]
    max_runners: Option<String>,
    /// Comma-separated job statuses counted as demand (OUTSTANDING_STATUSES).
    #[arg(long)]
    outstanding_statuses: Option<String>,
    /// GitHub REST API base URL (GITHUB_API_BASE).
    #[arg(long)]
    github_api: Option<String>,
    /// File holding the GitHub token (GITHUB_TOKEN_FILE); falls back to GITHUB_TOKEN.
    #[arg(long)]
    github_token_file: Option<PathBuf>,
    /// Namespace of the runner Deployment (KUBE_NAMESPACE); defaults to the pod's own.
    #[arg(long)]
    namespace: Option<String>,
    /// Runner Deployment name (KUBE_DEPLOYMENT).
    #[arg(long)]
    deployment: Option<String>,
    /// Label selector for runner pods (POD_SELECTOR); defaults to app=<deployment>.
    #[arg(long)]
    pod_selector: Option<String>,
    /// Kubernetes API base URL or "in-cluster" (KUBE_API_BASE).
    #[arg(long)]
    kube_api: Option<String>,
    /// Service-account mount directory (KUBE_MOUNT_ROOT).
    #[arg(long)]
    kube_mount_root: Option<PathBuf>,
    /// host:port for /healthz and /status, or "disabled" (STATUS_ADDR).
    #[arg(long)]
    status_addr: Option<String>,
}

struct Layered<'a> {
    env: &'a HashMap<String, String>,
}

impl Layered<'_> {
    fn pick(&self, flag: Option<String>, var: &str) -> Option<String> {
        flag.filter(|v| !v.is_empty()).or_else(|| self.env.get(var).filter(|v| !v.is_empty()).cloned())
    }
}

/// Parses a duration written as humantime ("15m", "84h") or bare seconds.
pub fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<u64>() {
        return Ok(Duration::from_secs(secs));
    }
    humantime::parse_duration(s).map_err(|e| format!("{s:?}: {e}"))
}

fn duration_field(value: Option<String>, field: &'static str, default: Duration) -> Result<Duration, ConfigError> {
    match value {
        None => Ok(default),
        Some(v) => parse_duration(&v).map_err(|message| ConfigError::Invalid { field, message }),
    }
}

/// Builds a validated [`Config`]. `args` excludes the program name.
pub fn load_config(args: &[String], env: &HashMap<String, String>) -> Result<Config, ConfigError> {
    let flags = Flags::try_parse_from(std::iter::once("runner-manager".to_string()).chain(args.iter().cloned()))?;
    let layered = Layered { env };

    let owner = layered.pick(flags.owner, "GH_OWNER").ok_or(ConfigError::Missing("owner (--owner / GH_OWNER)"))?;
    let repo_name = layered.pick(flags.repo, "GH_REPO").ok_or(ConfigError::Missing("repo (--repo / GH_REPO)"))?;
    let repo = RepoCoordinates::new(owner, repo_name)?;

    let defaults = Policy::default();
    let runner_labels = match layered.pick(flags.labels, "RUNNER_LABELS") {
        Some(csv) => LabelSet::parse_csv(&csv),
        None => defaults.runner_labels.clone(),
    };
    if runner_labels.is_empty() {
        return Err(ConfigError::Invalid { field: "labels", message: "at least one label is required".into() });
    }
    let outstanding_statuses = match layered.pick(flags.outstanding_statuses, "OUTSTANDING_STATUSES") {
        Some(csv) => {
            csv.split(',').map(|s| s.trim().to_ascii_lowercase()).filter(|s| !s.is_empty()).collect::<BTreeSet<_>>()
        }
        None => defaults.outstanding_statuses.clone(),
    };
    if outstanding_statuses.is_empty() {
        return Err(ConfigError::Invalid {
            field: "outstanding-statuses",
            message: "at least one status is required".into(),
        });
    }
    let max_runners = match layered.pick(flags.max_runners, "MAX_RUNNERS") {
        None => defaults.max_runners,
        Some(v) => v
            .trim()
            .parse::<u32>()
            .map_err(|e| ConfigError::Invalid { field: "max-runners", message: format!("{v:?}: {e}") })?,
    };
    let policy = Policy {
        poll_interval: duration_field(
            layered.pick(flags.poll_interval, "POLL_INTERVAL"),
            "poll-interval",
            defaults.poll_interval,
        )?,
        force_interval: duration_field(
            layered.pick(flags.force_interval, "FORCE_INTERVAL"),
            "force-interval",
            defaults.force_interval,
        )?,
        min_dwell: duration_field(layered.pick(flags.min_dwell, "MIN_DWELL"), "min-dwell", defaults.min_dwell)?,
        max_runners,
        runner_labels,
        outstanding_statuses,
    };
    policy.validate()?;

    let github_api_base =
        layered.pick(flags.github_api, "GITHUB_API_BASE").unwrap_or_else(|| DEFAULT_API_BASE.to_string());
    url::Url::parse(&github_api_base)
        .map_err(|e| ConfigError::Invalid { field: "github-api", message: format!("{github_api_base:?}: {e}") })?;
    let token_file =
        flags.github_token_file.or_else(|| env.get("GITHUB_TOKEN_FILE").filter(|v| !v.is_empty()).map(PathBuf::from));
    let (github_token_source, github_token) = match token_file {
        Some(path) => {
            let token = read_token_file(&path)?;
            (TokenSource::File(path), token)
        }
        None => match env.get("GITHUB_TOKEN").filter(|v| !v.trim().is_empty()) {
            Some(v) => (TokenSource::Env("GITHUB_TOKEN"), SecretToken::from_file_contents(v)),
            None => {
                return Err(ConfigError::Missing(
                    "GitHub token (--github-token-file / GITHUB_TOKEN_FILE / GITHUB_TOKEN)",
                ))
            }
        },
    };

    let kube_deployment = layered
        .pick(flags.deployment, "KUBE_DEPLOYMENT")
        .ok_or(ConfigError::Missing("deployment (--deployment / KUBE_DEPLOYMENT)"))?;
    let kube_api_base = layered.pick(flags.kube_api, "KUBE_API_BASE").unwrap_or_else(|| IN_CLUSTER.to_string());
    if kube_api_base != IN_CLUSTER {
        url::Url::parse(&kube_api_base)
            .map_err(|e| ConfigError::Invalid { field: "kube-api", message: format!("{kube_api_base:?}: {e}") })?;
    }
    let kube_mount_root = flags
        .kube_mount_root
        .or_else(|| env.get("KUBE_MOUNT_ROOT").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MOUNT_ROOT));
    let kube_namespace = match layered.pick(flags.namespace, "KUBE_NAMESPACE") {
        Some(ns) => ns,
        None => std::fs::read_to_string(kube_mount_root.join("namespace"))
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or(ConfigError::Missing("namespace (--namespace / KUBE_NAMESPACE)"))?,
    };
    let pod_selector =
        layered.pick(flags.pod_selector, "POD_SELECTOR").unwrap_or_else(|| format!("app={kube_deployment}"));

    let status_listen_address = match layered.pick(flags.status_addr, "STATUS_ADDR") {
        None => None,
        Some(v) if v.eq_ignore_ascii_case("disabled") || v.eq_ignore_ascii_case("off") => None,
        Some(v) => Some(
            v.parse::<SocketAddr>()
                .map_err(|e| ConfigError::Invalid { field: "status-addr", message: format!("{v:?}: {e}") })?,
        ),
    };

    Ok(Config {
        repo,
        policy,
        github_api_base,
        github_token_source,
        github_token,
        kube_namespace,
        kube_deployment,
        kube_api_base,
        kube_mount_root,
        pod_selector,
        status_listen_address,
    })
}

fn read_token_file(path: &Path) -> Result<SecretToken, ConfigError> {
    let contents =
        std::fs::read_to_string(path).map_err(|source| ConfigError::TokenFile { path: path.to_path_buf(), source })?;
    let token = SecretToken::from_file_contents(&contents);
    if token.is_empty() {
        return Err(ConfigError::EmptyToken(path.to_path_buf()));
    }
    Ok(token)
}
