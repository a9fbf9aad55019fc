//! Starts every service and the device agents in one process on loopback
//! ports, drives a student session over HTTP, then runs one tester check.
//!
//! Run with `cargo run -p rlabs-server --example http_stack`.

use std::sync::Arc;
use std::time::Duration;

use rlabs_core::config::{PlatformConfig, SinkConfig};
use rlabs_core::tester::{LabClient, Tester};
use rlabs_server::{FleetOptions, HttpLabClient, LaunchOptions, Role, Stack};
use serde_json::json;

fn main() {
    let dir = std::env::temp_dir().join(format!("rlabs-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = PlatformConfig::fleet(1, 1);
    for bind in [&mut cfg.orchestrator_bind, &mut cfg.cloud_bind, &mut cfg.signaling_bind] {
        *bind = "127.0.0.1:0".into();
    }
    cfg.tester.ledger_path = dir.join("ledger.ndjson");
    cfg.sink = SinkConfig::Stdout;

    let opts = LaunchOptions {
        agents: FleetOptions::default(),
        tester_interval_ms: None,
        events: Arc::new(|event| println!("event {event}")),
    };
    let stack = Stack::launch(&cfg, &Role::ALL, opts).expect("loopback ports are free");
    assert!(stack.wait_agents_ready(Duration::from_secs(10)), "agents never reached idle");
    let ep = stack.endpoints().clone();

    let mut client = HttpLabClient::new(&ep.orchestrator, &ep.signaling);
    let token = client.login("student1", "pass1").unwrap();
    client.register_peer("browser-1").unwrap();
    println!("enter FL: {:?}", client.enter(&token, "FL", "browser-1").unwrap());
    client.input(&token, "FL", &json!({"target": "screen", "steps": 500})).unwrap();
    client.wait(2_500);
    let out = client.output(&token, "FL").unwrap();
    println!("pins after the move: {}", serde_json::to_string(&out.pins).unwrap());
    let frames = client.take_received("browser-1");
    if let Some(f) = frames.last() {
        println!("{} frames streamed, last from {} with tags {:?}", frames.len(), f.frame.camera_id, f.tags);
    }
    client.leave(&token, "FL").unwrap();
    client.unregister_peer("browser-1");

    let tester = Tester::new(&cfg);
    let mut client = HttpLabClient::new(&ep.orchestrator, &ep.signaling);
    let report = tester.check(&mut client, "VR");
    println!("tester on VR: passed = {}, reasons = {:?}", report.passed(), report.reason_labels());

    for (device, exit) in stack.shutdown() {
        println!("{device}: {exit:?}");
    }
    let _ = std::fs::remove_dir_all(dir);
}
