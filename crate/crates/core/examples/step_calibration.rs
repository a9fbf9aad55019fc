//! Moves the screen carriage 500 steps through a user session, then measures
//! the move on rendered side-camera frames.
//!
//! Run with `cargo run -p rlabs-core --example step_calibration`.

use rlabs_core::config::PlatformConfig;
use rlabs_core::cv::{calibrate_mm_per_px, detect_moves, track_displacement, verify_motion, Axis, CvParams};
use rlabs_core::physics::{render_frame, ExperimentState, RenderConfig};
use rlabs_core::sim::World;
use serde_json::json;

fn bench(w: &World) -> ExperimentState {
    w.rig("fl-1").expect("fl-1 exists")
}

fn main() {
    let mut w = World::new(PlatformConfig::fleet(1, 0), 0).expect("valid config");
    w.advance(200);
    let before = bench(&w);

    let tok = w.login("student1", "pass1").expect("seeded account");
    w.register_peer("peer-1").expect("fresh peer");
    w.enter(&tok, "FL", "peer-1").expect("node is free");
    w.advance(100);
    w.input(&tok, "FL", &json!({"target": "screen", "steps": 500})).expect("session is granted");
    w.advance(3_000);
    let after = bench(&w);

    let (ExperimentState::FocalLength(b), ExperimentState::FocalLength(a)) = (&before, &after) else {
        unreachable!("FL nodes hold a lens bench");
    };
    println!("screen {} -> {} steps, {:.2} mm", b.v_steps, a.v_steps, (a.v_cm() - b.v_cm()) * 10.0);

    let cfg = RenderConfig::default();
    let f0 = render_frame(&before, "side", &cfg, 1, 0).unwrap();
    let f1 = render_frame(&after, "side", &cfg, 2, 0).unwrap();
    let scale = calibrate_mm_per_px(&f0.image, cfg.side.fiducial_roi(&cfg), cfg.side.fiducial_mm).unwrap();
    let moves = detect_moves(&f0.image, &f1.image, cfg.side.tracking_roi(&cfg), &CvParams::default()).unwrap();
    let tracking = track_displacement(&moves.vacated, &moves.appeared, scale).unwrap();
    let verdict = verify_motion(5.0, Axis::X, &tracking, 0.25);
    println!("scale {scale} mm/px, tracked {:?} mm, pass = {}", verdict.observed_mm, verdict.pass);
}
