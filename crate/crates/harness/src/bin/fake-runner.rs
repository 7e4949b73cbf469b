use std::collections::HashMap;
use std::process::ExitCode;
use std::sync::Arc;

use runner_harness::fake_runner::run_process;
use runner_manager::clock::{Shutdown, SystemClock};

fn main() -> ExitCode {
    let shutdown = Shutdown::new();
    if let Err(e) = shutdown.register_signals() {
        eprintln!("fake-runner: cannot install signal handlers: {e}");
        return ExitCode::FAILURE;
    }
    let env: HashMap<String, String> = std::env::vars().collect();
    match run_process(&env, Arc::new(SystemClock::new(shutdown.clone())), &shutdown) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fake-runner: {e:#}");
            ExitCode::FAILURE
        }
    }
}
