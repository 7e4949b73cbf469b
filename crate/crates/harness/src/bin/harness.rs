use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use runner_harness::checks;
use runner_harness::oracle::oracle_decisions;
use runner_harness::scenario::{random_scenario, restart_scenario, zero_load_scenario, EventKind, Scenario};
use runner_harness::sim::{run_scenario, SimConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "harness", version, about = "Deterministic testbed for the runner manager")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Random,
    Restart,
    ZeroLoad,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario against the real manager and check it.
    Run {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// NDJSON trace destination; stdout when absent.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Extra manager flag, repeatable (e.g. --manager-arg=--poll-interval=30s).
        #[arg(long = "manager-arg", allow_hyphen_values = true)]
        manager_args: Vec<String>,
    },
    /// Print the oracle's expected decisions for a scenario.
    Oracle {
        #[arg(long)]
        script: PathBuf,
    },
    /// Print a generated scenario as YAML.
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Length for zero-load scenarios.
        #[arg(long, default_value_t = 30)]
        days: i64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("harness: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { script, seed, trace_out, manager_args } => {
            let scenario = Scenario::load(&script)?;
            let sim = SimConfig { manager_args, ..SimConfig::with_seed(seed) };
            let run = run_scenario(&scenario, &sim)?;
            let policy = run.config.policy.clone();
            let expected = oracle_decisions(&scenario, &policy)?;
            let keepalive = checks::check_keepalive(&scenario, &run, &policy);
            let idle = !scenario.events.iter().any(|e| matches!(e.kind, EventKind::EnqueueJob { .. }));
            let latency =
                checks::check_demand_latency(&scenario, &run, &policy, 2 * policy.poll_interval.as_secs() as i64);
            let results = json!({
                "cap": checks::check_cap(&run, policy.max_runners),
                "oracle": checks::check_oracle(&run, &expected),
                "demand_latency": latency.violations,
                "keepalive": keepalive.violations,
                // Jobs reset the idle clock, so the window count only binds without load.
                "keepalive_windows": if idle { keepalive.window_violations } else { Vec::new() },
                "no_premature_scale_down": checks::check_no_premature_scale_down(&scenario, &run),
                "namespace": checks::check_namespace(&run),
                "wire": checks::check_wire(&run),
                "trace": checks::check_trace(&run),
            });
            let clean =
                results.as_object().expect("object").values().all(|v| v.as_array().is_some_and(|a| a.is_empty()));
            match &trace_out {
                Some(path) => {
                    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    run.trace.write_ndjson(std::io::BufWriter::new(file))?;
                }
                None => run.trace.write_ndjson(std::io::stdout().lock())?,
            }
            let summary = json!({
                "scenario": run.name,
                "seed": seed,
                "horizon": run.horizon,
                "reconciles": run.records.len(),
                "scale_writes": run.scale_writes,
                "restarts": run.restarts,
                "exits": run.exits.iter().map(|e| format!("{e:?}")).collect::<Vec<_>>(),
                "max_credential_age": run.max_credential_age,
                "demand_latency_max": latency.max_latency,
                "failed": run.failed() || !clean,
                "violations": results,
            });
            writeln!(std::io::stderr(), "{}", serde_json::to_string_pretty(&summary)?)?;
            Ok(if run.failed() || !clean { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Oracle { script } => {
            let scenario = Scenario::load(&script)?;
            let policy = SimConfig::default().manager_config()?.policy;
            let out = oracle_decisions(&scenario, &policy)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { kind, seed, days } => {
            let scenario = match kind {
                Kind::Random => random_scenario(seed),
                Kind::Restart => restart_scenario(seed),
                Kind::ZeroLoad => zero_load_scenario(days),
            };
            print!("{}", serde_yaml::to_string(&scenario)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
