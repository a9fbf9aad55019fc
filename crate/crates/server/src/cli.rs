//! The `rlabs` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rlabs_core::config::PlatformConfig;
use rlabs_core::scenario::{run_scenario, ScenarioScript};
use rlabs_core::tester::{load_ledger, uptime_summary, LedgerError};
use serde_json::{json, Value};

use crate::agents::{AgentExit, FleetOptions};
use crate::client::HttpLabClient;
use crate::stack::{check_event, configured_tester, LaunchError, LaunchOptions, Role, Stack};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rlabs", version, about = "Remote laboratory services, agents, tester and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the selected services in this process.
    Serve(ServeArgs),
    /// Start only the device agents, against services elsewhere.
    Agents(AgentArgs),
    /// Run tester checks against a running stack.
    Test(TestArgs),
    /// Scenario scripts on virtual time.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCommand,
    },
    /// Availability tables from a ledger.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Platform config JSON. Bind addresses may be overridden with
    /// RLABS_ORCHESTRATOR_BIND, RLABS_CLOUD_BIND and RLABS_SIGNALING_BIND.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Roles to run; all of them when omitted.
    #[arg(long, value_enum, value_delimiter = ',', num_args = 1..)]
    pub roles: Vec<Role>,
    /// Connection attempts an agent makes before giving up.
    #[arg(long, default_value_t = 10)]
    pub max_attempts: u32,
    /// Tester interval in seconds, overriding the config.
    #[arg(long)]
    pub tester_interval_s: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 10)]
    pub max_attempts: u32,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Experiments to check; every configured one when omitted.
    #[arg(long = "experiment")]
    pub experiments: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Run a script and print its report.
    Run {
        script: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// Print only the JSON document.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON document to this file.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

/// Writes one JSON event line; a closed stdout is not an error.
fn emit(v: &Value) {
    let _ = writeln!(std::io::stdout().lock(), "{v}");
}

fn load_config(path: &Path) -> Result<PlatformConfig, u8> {
    match PlatformConfig::load(path) {
        Ok(mut cfg) => {
            cfg.apply_env_overrides();
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("error: {e}");
            emit(&json!({ "event": "error", "kind": "config", "message": e.to_string() }));
            Err(EXIT_CONFIG)
        }
    }
}

fn launch_error(e: LaunchError) -> u8 {
    eprintln!("error: {e}");
    emit(&json!({ "event": "error", "kind": "launch", "message": e.to_string() }));
    EXIT_CONFIG
}

/// Installs a Ctrl-C handler that sets the returned flag.
fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    std::thread::spawn(move || {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else {
            return;
        };
        rt.block_on(async {
            if tokio::signal::ctrl_c().await.is_ok() {
                f.store(true, Ordering::SeqCst);
            }
        });
    });
    flag
}

fn serve(cfg: &PlatformConfig, roles: &[Role], max_attempts: u32, tester_interval_ms: Option<u64>) -> u8 {
    let opts = LaunchOptions {
        agents: FleetOptions {
            max_attempts: max_attempts.max(1),
            ..FleetOptions::default()
        },
        tester_interval_ms,
        events: Arc::new(|v| emit(&v)),
    };
    let stack = match Stack::launch(cfg, roles, opts) {
        Ok(s) => s,
        Err(e) => return launch_error(e),
    };
    let interrupted = interrupt_flag();
    let agents_only = roles.iter().all(|r| *r == Role::Agents);
    loop {
        if interrupted.load(Ordering::SeqCst) {
            break;
        }
        if agents_only && stack.agents().is_some_and(|a| a.is_finished()) {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let exits = stack.shutdown();
    let failed = exits
        .iter()
        .any(|(_, e)| matches!(e, AgentExit::GaveUp { .. } | AgentExit::Rejected(_)));
    if failed {
        EXIT_FAILED
    } else {
        EXIT_OK
    }
}

fn test(cfg: &PlatformConfig, experiments: &[String]) -> u8 {
    let tester = configured_tester(cfg);
    let ids = if experiments.is_empty() {
        tester.experiment_ids()
    } else {
        experiments.to_vec()
    };
    if let Some(bad) = ids.iter().find(|id| cfg.experiment(id).is_none()) {
        eprintln!("error: experiment: unknown id {bad:?}");
        return EXIT_CONFIG;
    }
    let mut all_passed = true;
    for id in ids {
        let mut client = HttpLabClient::new(&cfg.orchestrator_bind, &cfg.signaling_bind);
        let report = tester.run_check(&mut client, &id);
        all_passed &= report.passed();
        emit(&check_event(&report));
    }
    if all_passed {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn scenario(script: &Path, out: Option<&Path>) -> u8 {
    let report = match ScenarioScript::load(script).and_then(|s| run_scenario(&s)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let text = report.to_json_pretty();
    println!("{text}");
    if let Some(path) = out {
        if let Err(e) = std::fs::write(path, &text) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    }
    for f in &report.failures {
        eprintln!("FAILED: {f}");
    }
    if report.passed {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn report(args: &ReportArgs) -> u8 {
    let reports = match load_ledger(&args.ledger) {
        Ok(r) => r,
        Err(LedgerError::Io(e)) => {
            eprintln!("error: cannot read ledger {}: {e}", args.ledger.display());
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: ledger {}: {e}", args.ledger.display());
            return EXIT_CONFIG;
        }
    };
    let Some(summary) = uptime_summary(&reports) else {
        let doc = json!({ "ledger": args.ledger, "readings": 0, "summary": null });
        if args.json {
            println!("{doc}");
        } else {
            println!("no data: ledger {} holds no readings", args.ledger.display());
        }
        return EXIT_OK;
    };
    let doc = json!({ "ledger": args.ledger, "readings": reports.len(), "summary": summary });
    if let Some(path) = &args.json_out {
        if let Err(e) = std::fs::write(path, serde_json::to_string_pretty(&doc).expect("summary serializes")) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc).expect("summary serializes"));
    } else {
        print!("{}", summary.to_table());
        println!(
            "fleet availability: {:.1}% online over {} experiment-days with readings",
            summary.fleet_online_percent,
            summary.fleet.days()
        );
    }
    EXIT_OK
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli) -> u8 {
    match cli.command {
        Command::Serve(a) => match load_config(&a.config.config) {
            Ok(cfg) => {
                let roles = if a.roles.is_empty() { Role::ALL.to_vec() } else { a.roles };
                serve(&cfg, &roles, a.max_attempts, a.tester_interval_s.map(|s| s * 1_000))
            }
            Err(code) => code,
        },
        Command::Agents(a) => match load_config(&a.config.config) {
            Ok(cfg) => serve(&cfg, &[Role::Agents], a.max_attempts, None),
            Err(code) => code,
        },
        Command::Test(a) => match load_config(&a.config.config) {
            Ok(cfg) => test(&cfg, &a.experiments),
            Err(code) => code,
        },
        Command::Scenario {
            action: ScenarioCommand::Run { script, out },
        } => scenario(&script, out.as_deref()),
        Command::Report(a) => report(&a),
    }
}

/// Entry point of the `rlabs` binary.
pub fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RLABS_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}
