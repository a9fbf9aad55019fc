//! One user session on a simulated fleet, checked against the expected
//! message order, then an entry whose camera never acknowledges.
//!
//! Run with `cargo run -p rlabs-core --example session_trace`.

use rlabs_core::agent::FaultFlags;
use rlabs_core::config::PlatformConfig;
use rlabs_core::orchestrator::{EntryStatus, ACK_TIMEOUT_MS};
use rlabs_core::sim::{check_probe_timeout, check_session_flow, World};
use serde_json::json;

fn main() {
    let mut w = World::new(PlatformConfig::fleet(1, 0), 0).unwrap();
    w.advance(200);
    let tok = w.login("student1", "pass1").unwrap();
    w.register_peer("peer-1").unwrap();
    w.enter(&tok, "FL", "peer-1").unwrap();
    w.advance(100);
    let EntryStatus::Granted { session_id, .. } = w.status(&tok, "FL").unwrap() else {
        panic!("expected a grant");
    };
    w.input(&tok, "FL", &json!({"target": "object", "steps": -300})).unwrap();
    w.advance(2_000);
    w.leave(&tok, "FL").unwrap();
    w.advance(100);
    for e in w.trace().iter().filter(|e| e.session_id.as_deref() == Some(session_id.as_str())) {
        println!("{:>6} {:<22} {}", e.ts, e.actor, e.event);
    }
    let flow = check_session_flow(w.trace(), &session_id, ACK_TIMEOUT_MS).unwrap();
    println!("milestones: {}", flow.milestones.join(" -> "));

    let mut w = World::new(PlatformConfig::fleet(1, 0), 0).unwrap();
    w.advance(200);
    w.set_faults("fl-1-side", FaultFlags { busy_no_ack: true, ..Default::default() });
    let tok = w.login("student1", "pass1").unwrap();
    w.register_peer("peer-2").unwrap();
    let EntryStatus::Pending { session_id, .. } = w.enter(&tok, "FL", "peer-2").unwrap() else {
        panic!("expected a probe");
    };
    w.advance(6_000);
    let node = check_probe_timeout(w.trace(), &session_id, ACK_TIMEOUT_MS).unwrap();
    println!("{node} marked unavailable {ACK_TIMEOUT_MS} ms after the probe; user sees {:?}", w.status(&tok, "FL").unwrap());
}
