use std::collections::HashMap;
use std::sync::Arc;

use runner_manager::clock::{Shutdown, SystemClock};
use runner_manager::config::{load_config, ConfigError};
use runner_manager::service::{run_service, ServiceExit};
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();

    let args: Vec<String> = std::env::args().skip(1).collect();
    let env: HashMap<String, String> = std::env::vars().collect();
    let config = match load_config(&args, &env) {
        Ok(c) => c,
        Err(ConfigError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("runner-manager: configuration error: {e}");
            std::process::exit(1);
        }
    };

    let shutdown = Shutdown::new();
    if let Err(e) = shutdown.register_signals() {
        eprintln!("runner-manager: cannot install signal handlers: {e}");
        std::process::exit(1);
    }
    let clock = Arc::new(SystemClock::new(shutdown.clone()));
    let exit = run_service(&config, clock, shutdown, &env);
    match &exit {
        ServiceExit::Terminated => tracing::info!("terminated"),
        ServiceExit::CredentialFailure(m) | ServiceExit::Fatal(m) => {
            tracing::error!("{m}");
            eprintln!("runner-manager: {m}");
        }
    }
    std::process::exit(exit.exit_code());
}
