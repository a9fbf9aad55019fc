//! The virtual user checks a healthy fleet, then a fleet with a stalled motor
//! and a stuck homing switch. Failed checks produce one notification each.
//!
//! Run with `cargo run -p rlabs-core --example auto_tester`.

use rlabs_core::agent::FaultFlags;
use rlabs_core::config::{PlatformConfig, SinkConfig};
use rlabs_core::sim::World;
use rlabs_core::tester::{Notifier, Tester};

fn main() {
    let mut w = World::new(PlatformConfig::fleet(1, 1), 0).unwrap();
    w.advance(200);
    let tester = Tester::new(w.config()).with_notifier(Notifier::new(SinkConfig::Memory));
    for exp in ["FL", "VR"] {
        let r = tester.run_check(&mut w, exp);
        println!("{exp} healthy: passed = {}, node = {:?}", r.passed(), r.node_id);
    }

    w.set_faults("fl-1-ctl", FaultFlags { motor_stall: Some(0.4), ..Default::default() });
    w.set_faults("vr-1-ctl", FaultFlags { stuck_limit_switch: true, ..Default::default() });
    w.power_cycle("vr-1-ctl");
    w.advance(500);
    for exp in ["FL", "VR"] {
        let r = tester.run_check(&mut w, exp);
        println!("{exp} faulted: passed = {}, reasons = {:?}", r.passed(), r.reason_labels());
    }
    let notifier = tester.notifier().unwrap();
    println!("{} notifications", notifier.delivered());
    for d in notifier.deliveries() {
        println!("  {}", serde_json::to_string(&d).unwrap());
    }
}
