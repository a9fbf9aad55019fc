//! Streams frames through the signaling broker on virtual time and shows the
//! per-profile delivery delay.
//!
//! Run with `cargo run -p rlabs-core --example latency_injection`.

use rlabs_core::image::{Frame, GrayImage};
use rlabs_core::signaling::{Broker, InboxItem, LatencyProfiles, MediaApi};

fn main() {
    let broker = Broker::new(LatencyProfiles::default());
    broker.register("viewer", 0).unwrap();
    let mut sessions = Vec::new();
    for (profile, _) in broker.profiles().0.clone() {
        let cam = format!("cam-{profile}");
        broker.register(&cam, 0).unwrap();
        sessions.push((profile.clone(), broker.call(&cam, "viewer", &profile, 0).unwrap()));
    }

    let image = GrayImage::filled(32, 24, 100);
    for t in (0..1_000).step_by(100) {
        for (_, sid) in &sessions {
            broker.publish_frame(*sid, Frame::new(image.clone(), t, "demo/cam"), t).unwrap();
        }
    }
    let mut now = 0;
    while let Some(due) = broker.next_due() {
        now = due;
        broker.pump(now);
    }
    println!("all frames delivered by t = {now} ms");

    for item in broker.take_inbox("viewer") {
        if let InboxItem::Frame(f) = item {
            if f.seq == 1 {
                let profile = &sessions.iter().find(|s| s.1 == f.session_id).unwrap().0;
                println!("{profile:>9}: sent {} delivered {} (+{} ms)", f.sent_at, f.delivered_at, f.delivered_at - f.sent_at);
            }
        }
    }
}
