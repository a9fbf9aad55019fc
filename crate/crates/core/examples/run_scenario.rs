//! Runs a bundled scenario script on virtual time and prints its report.
//! Pass another script path to run that instead.
//!
//! Run with `cargo run -p rlabs-core --example run_scenario -- crates/core/scenarios/fault.json`.

use std::path::PathBuf;

use rlabs_core::scenario::{run_scenario, ScenarioScript};

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/multiplexing.json"));
    let script = ScenarioScript::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let report = run_scenario(&script).expect("scenario runs");
    for s in &report.steps {
        println!("{:>7} ms  {:<20} {}", s.at_ms, s.op, if s.ok { "ok" } else { "FAILED" });
    }
    println!(
        "{}: passed = {}, {} checks, {} notifications, {} trace entries",
        report.name,
        report.passed,
        report.checks.len(),
        report.notifications,
        report.trace_entries
    );
    for f in &report.failures {
        println!("  {f}");
    }
}
