//! One-time runner directory initialization and the runner pod entrypoint.
//!
//! The persistent directory holds the runner's registration and anything the
//! runner software updates about itself; job workspaces live under the
//! separate ephemeral work directory.

mod manifests;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{rfc3339, Shutdown};
use crate::github::{GithubClient, GithubError};
use crate::labels::LabelSet;
use crate::repo::RepoCoordinates;

pub use manifests::{emit_manifests, format_quantity, parse_quantity, ManifestInput};

pub const MARKER_FILE: &str = ".runner-initialized";
pub const RUNNER_CONFIG_FILE: &str = ".runner.json";
pub const FAKE_RUNNER_ENV: &str = "FAKE_RUNNER_EXE";
pub const PERSISTENT_DIR_ENV: &str = "RUNNER_PERSISTENT_DIR";
pub const WORK_DIR_ENV: &str = "RUNNER_WORK_DIR";
pub const DEFAULT_GPU_RESOURCE: &str = "nvidia.com/gpu";

const GIB: u64 = 1 << 30;
/// Grace period between the forwarded SIGTERM and SIGKILL.
const STOP_GRACE: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerProfile {
    pub name_prefix: String,
    pub labels: LabelSet,
    pub cpu_request: u32,
    pub memory_request: u64,
    pub ephemeral_request: u64,
    pub gpu_request: u32,
    pub gpu_resource: String,
    pub persistent_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl RunnerProfile {
    pub fn new(persistent_dir: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            name_prefix: "gpu-runner".into(),
            labels: LabelSet::new(crate::policy::DEFAULT_RUNNER_LABELS),
            cpu_request: 4,
            memory_request: 8 * GIB,
            ephemeral_request: 80 * GIB,
            gpu_request: 1,
            gpu_resource: DEFAULT_GPU_RESOURCE.into(),
            persistent_dir: persistent_dir.into(),
            work_dir: work_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BootstrapError> {
        let bad = |m: String| Err(BootstrapError::Profile(m));
        if self.name_prefix.is_empty() {
            return bad("runner name must not be empty".into());
        }
        if self.labels.is_empty() {
            return bad("at least one runner label is required".into());
        }
        if self.persistent_dir == self.work_dir {
            return bad(format!(
                "persistent and work directories must differ (both {})",
                self.persistent_dir.display()
            ));
        }
        if self.work_dir.starts_with(&self.persistent_dir) {
            return bad("work directory must not live inside the persistent directory".into());
        }
        if self.ephemeral_request == 0 {
            return bad("ephemeral storage request must be positive".into());
        }
        Ok(())
    }

    pub fn marker_path(&self) -> PathBuf {
        self.persistent_dir.join(MARKER_FILE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStatus {
    Initialized,
    AlreadyInitialized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitResult {
    pub status: InitStatus,
    pub config_marker: PathBuf,
}

/// How the registration is recorded in the persistent directory.
#[derive(Clone, Debug)]
pub enum ConfigureMode {
    /// Write [`RUNNER_CONFIG_FILE`] directly (used with the fake runner).
    Direct { api_base: String },
    /// Run the runner distribution's own configuration script.
    External { script: PathBuf },
}

/// Registration written by [`ConfigureMode::Direct`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerRegistration {
    pub url: String,
    pub api_base: String,
    pub owner: String,
    pub repo: String,
    pub token: String,
    pub name: String,
    pub labels: LabelSet,
    pub work_dir: PathBuf,
    pub configured_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("invalid runner profile: {0}")]
    Profile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("registration token request failed: {0}")]
    Token(#[from] GithubError),
    #[error("another initialization holds the lock on {0}")]
    Locked(PathBuf),
    #[error("runner configuration step failed: {0}")]
    Configure(String),
    #[error("{0} is not initialized; run `runner-bootstrap init --dir {0}` first")]
    NotInitialized(PathBuf),
    #[error("cannot start runner {path}: {source}")]
    Spawn {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BootstrapError + '_ {
    move |source| BootstrapError::Io { path: path.to_path_buf(), source }
}

/// Holds an exclusive advisory lock on a directory for its lifetime.
struct DirLock(File);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, BootstrapError> {
        let file = File::open(dir).map_err(io_err(dir))?;
        match file.try_lock() {
            Ok(()) => Ok(Self(file)),
            Err(std::fs::TryLockError::WouldBlock) => Err(BootstrapError::Locked(dir.to_path_buf())),
            Err(std::fs::TryLockError::Error(e)) => Err(io_err(dir)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

/// Registers the runner once. Later calls find the marker and change nothing.
/// The marker is written last, so a failure at any step leaves the directory
/// uninitialized and the call can simply be repeated.
pub fn init_runner_dir(
    profile: &RunnerProfile,
    repo: &RepoCoordinates,
    github: &mut GithubClient,
    mode: &ConfigureMode,
    now: DateTime<Utc>,
    token_deadline: DateTime<Utc>,
) -> Result<InitResult, BootstrapError> {
    profile.validate()?;
    let dir = &profile.persistent_dir;
    let meta = std::fs::metadata(dir).map_err(io_err(dir))?;
    if !meta.is_dir() {
        return Err(BootstrapError::Profile(format!("{} is not a directory", dir.display())));
    }
    let marker = profile.marker_path();
    let _lock = DirLock::acquire(dir)?;
    if marker.exists() {
        return Ok(InitResult { status: InitStatus::AlreadyInitialized, config_marker: marker });
    }

    let token = github.create_registration_token(repo, token_deadline)?;
    match mode {
        ConfigureMode::Direct { api_base } => {
            let registration = RunnerRegistration {
                url: repo.html_url(),
                api_base: api_base.trim_end_matches('/').to_string(),
                owner: repo.owner().to_string(),
                repo: repo.repo().to_string(),
                token: token.token.expose().to_string(),
                name: profile.name_prefix.clone(),
                labels: profile.labels.clone(),
                work_dir: profile.work_dir.clone(),
                configured_at: now,
            };
            let body = serde_json::to_vec_pretty(&registration).expect("registration serializes");
            write_atomically(&dir.join(RUNNER_CONFIG_FILE), &body, true)?;
        }
        ConfigureMode::External { script } => {
            let output = Command::new(script)
                .current_dir(dir)
                .args(["--unattended", "--url"])
                .arg(repo.html_url())
                .arg("--token")
                .arg(token.token.expose())
                .arg("--name")
                .arg(&profile.name_prefix)
                .arg("--labels")
                .arg(profile.labels.to_csv())
                .arg("--work")
                .arg(&profile.work_dir)
                .arg("--replace")
                .output()
                .map_err(|source| BootstrapError::Spawn { path: script.clone(), source })?;
            if !output.status.success() {
                let stderr = String::from_utf8_lossy(&output.stderr);
                return Err(BootstrapError::Configure(format!(
                    "{} exited with {}: {}",
                    script.display(),
                    output.status,
                    stderr.replace(token.token.expose(), "***").trim()
                )));
            }
        }
    }
    write_atomically(&marker, format!("{}\n", rfc3339(now)).as_bytes(), false)?;
    tracing::info!(dir = %dir.display(), runner = %profile.name_prefix, "runner directory initialized");
    Ok(InitResult { status: InitStatus::Initialized, config_marker: marker })
}

fn write_atomically(path: &Path, contents: &[u8], private: bool) -> Result<(), BootstrapError> {
    let tmp = path.with_extension("tmp");
    let mut options = OpenOptions::new();
    options.write(true).create(true).truncate(true);
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut file = options.open(&tmp).map_err(io_err(&tmp))?;
    file.write_all(contents).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn read_registration(persistent_dir: &Path) -> Result<RunnerRegistration, BootstrapError> {
    let path = persistent_dir.join(RUNNER_CONFIG_FILE);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| BootstrapError::Configure(format!("{}: {e}", path.display())))
}

/// The executable the entrypoint would launch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunnerLaunch {
    pub program: PathBuf,
    pub env: Vec<(String, String)>,
    pub current_dir: PathBuf,
}

impl RunnerLaunch {
    pub fn resolve(profile: &RunnerProfile, env: &HashMap<String, String>) -> Result<Self, BootstrapError> {
        profile.validate()?;
        if !profile.marker_path().is_file() {
            return Err(BootstrapError::NotInitialized(profile.persistent_dir.clone()));
        }
        let program = env
            .get(FAKE_RUNNER_ENV)
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| profile.persistent_dir.join("run.sh"));
        Ok(Self {
            program,
            env: vec![
                (PERSISTENT_DIR_ENV.into(), profile.persistent_dir.display().to_string()),
                (WORK_DIR_ENV.into(), profile.work_dir.display().to_string()),
            ],
            current_dir: profile.persistent_dir.clone(),
        })
    }
}

/// Starts the runner and waits for it. A shutdown request is forwarded to
/// the child as SIGTERM; SIGKILL follows if it outlives the grace period.
/// Returns the child's exit code.
pub fn run_runner(
    profile: &RunnerProfile,
    env: &HashMap<String, String>,
    shutdown: &Shutdown,
) -> Result<i32, BootstrapError> {
    let launch = RunnerLaunch::resolve(profile, env)?;
    std::fs::create_dir_all(&profile.work_dir).map_err(io_err(&profile.work_dir))?;
    let mut child = Command::new(&launch.program)
        .current_dir(&launch.current_dir)
        .envs(launch.env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .spawn()
        .map_err(|source| BootstrapError::Spawn { path: launch.program.clone(), source })?;
    tracing::info!(pid = child.id(), program = %launch.program.display(), "runner started");
    let status = supervise(&mut child, shutdown).map_err(io_err(&launch.program))?;
    Ok(exit_code(status))
}

fn supervise(child: &mut Child, shutdown: &Shutdown) -> std::io::Result<ExitStatus> {
    let mut signalled: Option<Instant> = None;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(status);
        }
        match signalled {
            None if shutdown.is_requested() => {
                tracing::info!(pid = child.id(), "forwarding SIGTERM to runner");
                // SAFETY: kill(2) on a pid we spawned and have not yet reaped.
                unsafe {
                    libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
                }
                signalled = Some(Instant::now());
            }
            Some(at) if at.elapsed() > STOP_GRACE => {
                tracing::warn!(pid = child.id(), "runner ignored SIGTERM, killing");
                child.kill()?;
                return child.wait();
            }
            _ => {}
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}
