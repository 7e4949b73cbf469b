use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use runner_manager::bootstrap::{
    emit_manifests, init_runner_dir, parse_quantity, run_runner, ConfigureMode, InitStatus, ManifestInput,
    RunnerProfile, FAKE_RUNNER_ENV,
};
use runner_manager::clock::{Clock, Shutdown, SystemClock};
use runner_manager::config::parse_duration;
use runner_manager::github::{GithubClient, DEFAULT_API_BASE};
use runner_manager::http::{TlsRoots, UreqTransport};
use runner_manager::labels::LabelSet;
use runner_manager::policy::Policy;
use runner_manager::repo::RepoCoordinates;
use runner_manager::secret::SecretToken;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "runner-bootstrap",
    version,
    about = "Runner pod helpers: one-time init, entrypoint, example manifests"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Register the runner into its persistent directory (idempotent).
    Init(InitArgs),
    /// Launch the runner software; used as the pod entrypoint.
    Run(DirArgs),
    /// Print example Kubernetes manifests.
    Manifests(ManifestArgs),
}

#[derive(Args)]
struct DirArgs {
    /// Persistent directory holding the runner registration.
    #[arg(long)]
    dir: PathBuf,
    /// Ephemeral directory for job workspaces.
    #[arg(long, default_value = "/work")]
    work_dir: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Comma-separated runner labels.
    #[arg(long, env = "RUNNER_LABELS")]
    labels: Option<String>,
    /// Runner name registered with GitHub.
    #[arg(long, default_value = "gpu-runner")]
    name: String,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    dirs: DirArgs,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, env = "GH_OWNER")]
    owner: String,
    #[arg(long, env = "GH_REPO")]
    repo: String,
    #[arg(long, env = "GITHUB_API_BASE", default_value = DEFAULT_API_BASE)]
    github_api: String,
    /// File holding a token allowed to create registration tokens; falls back to GITHUB_TOKEN.
    #[arg(long, env = "GITHUB_TOKEN_FILE")]
    github_token_file: Option<PathBuf>,
    /// Runner configuration script; defaults to <dir>/config.sh unless FAKE_RUNNER_EXE is set.
    #[arg(long)]
    config_script: Option<PathBuf>,
    /// Write the registration file directly instead of running a configuration script.
    #[arg(long)]
    direct: bool,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    owner: String,
    #[arg(long)]
    repo: String,
    #[arg(long, default_value = "default")]
    namespace: String,
    #[arg(long, default_value = "gpu-runner")]
    deployment: String,
    #[arg(long)]
    manager_image: Option<String>,
    #[arg(long)]
    runner_image: Option<String>,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, default_value = "/persistent")]
    dir: PathBuf,
    #[arg(long, default_value = "/work")]
    work_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    cpu: u32,
    #[arg(long, default_value = "8Gi", value_parser = parse_quantity)]
    memory: u64,
    #[arg(long, default_value = "80Gi", value_parser = parse_quantity)]
    ephemeral_storage: u64,
    #[arg(long, default_value = "10Gi", value_parser = parse_quantity)]
    persistent_size: u64,
    #[arg(long, default_value_t = 1)]
    gpu: u32,
    #[arg(long, default_value = runner_manager::bootstrap::DEFAULT_GPU_RESOURCE)]
    gpu_resource: String,
    #[arg(long, value_parser = parse_duration)]
    poll_interval: Option<Duration>,
    #[arg(long, value_parser = parse_duration)]
    force_interval: Option<Duration>,
    #[arg(long, value_parser = parse_duration)]
    min_dwell: Option<Duration>,
    #[arg(long)]
    max_runners: Option<u32>,
}

fn profile(dirs: &DirArgs, args: &ProfileArgs) -> RunnerProfile {
    let mut p = RunnerProfile::new(&dirs.dir, &dirs.work_dir);
    p.name_prefix = args.name.clone();
    if let Some(csv) = &args.labels {
        p.labels = LabelSet::parse_csv(csv);
    }
    p
}

fn init(args: InitArgs, env: &HashMap<String, String>) -> Result<ExitCode> {
    let profile = profile(&args.dirs, &args.profile);
    let repo = RepoCoordinates::new(&args.owner, &args.repo)?;
    let token = match &args.github_token_file {
        Some(path) => SecretToken::from_file_contents(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        ),
        None => SecretToken::from_file_contents(env.get("GITHUB_TOKEN").map(String::as_str).unwrap_or_default()),
    };
    if token.is_empty() {
        bail!("no GitHub token: pass --github-token-file or set GITHUB_TOKEN");
    }
    let mode = if args.direct || (args.config_script.is_none() && env.contains_key(FAKE_RUNNER_ENV)) {
        ConfigureMode::Direct { api_base: args.github_api.clone() }
    } else {
        ConfigureMode::External {
            script: args.config_script.clone().unwrap_or_else(|| profile.persistent_dir.join("config.sh")),
        }
    };
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new(Shutdown::new()));
    let transport = Arc::new(UreqTransport::new(&TlsRoots::WebPki)?);
    let mut github = GithubClient::new(transport, &args.github_api, token, Arc::clone(&clock));
    let now = clock.now();
    let result = init_runner_dir(&profile, &repo, &mut github, &mode, now, now + chrono::TimeDelta::seconds(60))?;
    match result.status {
        InitStatus::Initialized => println!("initialized {}", result.config_marker.display()),
        InitStatus::AlreadyInitialized => println!("already initialized ({})", result.config_marker.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn run(args: DirArgs, env: &HashMap<String, String>) -> Result<ExitCode> {
    let labels = ProfileArgs { labels: env.get("RUNNER_LABELS").cloned(), name: "gpu-runner".into() };
    let profile = profile(&args, &labels);
    let shutdown = Shutdown::new();
    shutdown.register_signals().context("installing signal handlers")?;
    let code = run_runner(&profile, env, &shutdown)?;
    Ok(ExitCode::from(u8::try_from(code).unwrap_or(1)))
}

fn manifests(args: ManifestArgs) -> Result<ExitCode> {
    let dirs = DirArgs { dir: args.dir.clone(), work_dir: args.work_dir.clone() };
    let mut profile = profile(&dirs, &args.profile);
    profile.cpu_request = args.cpu;
    profile.memory_request = args.memory;
    profile.ephemeral_request = args.ephemeral_storage;
    profile.gpu_request = args.gpu;
    profile.gpu_resource = args.gpu_resource.clone();
    profile.validate()?;
    let defaults = Policy::default();
    let policy = Policy {
        poll_interval: args.poll_interval.unwrap_or(defaults.poll_interval),
        force_interval: args.force_interval.unwrap_or(defaults.force_interval),
        min_dwell: args.min_dwell.unwrap_or(defaults.min_dwell),
        max_runners: args.max_runners.unwrap_or(defaults.max_runners),
        runner_labels: profile.labels.clone(),
        outstanding_statuses: defaults.outstanding_statuses,
    };
    policy.validate()?;
    let mut input =
        ManifestInput::new(RepoCoordinates::new(&args.owner, &args.repo)?, &args.namespace, &args.deployment);
    input.policy = policy;
    input.persistent_size = args.persistent_size;
    if let Some(image) = args.manager_image {
        input.manager_image = image;
    }
    if let Some(image) = args.runner_image {
        input.runner_image = image;
    }
    print!("{}", emit_manifests(&input, &profile));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let env: HashMap<String, String> = std::env::vars().collect();
    let result = match cli.command {
        Cmd::Init(args) => init(args, &env),
        Cmd::Run(args) => run(args, &env),
        Cmd::Manifests(args) => manifests(args),
    };
    result.unwrap_or_else(|e| {
        eprintln!("runner-bootstrap: {e:#}");
        ExitCode::FAILURE
    })
}
