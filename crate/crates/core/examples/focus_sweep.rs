//! Sweeps the screen along the bench with the object at 20 cm and reports
//! where the image is sharpest.
//!
//! Run with `cargo run --release -p rlabs-core --example focus_sweep`.

use rlabs_core::physics::{focus_sweep, plateau_argmax, LensBenchState, RenderConfig};

fn main() {
    let bench = LensBenchState::default();
    let cfg = RenderConfig::default();
    println!("object at u = {} cm, f = {} cm", bench.u_cm(), bench.focal_len_cm);

    let mut coarse = Vec::new();
    for v in (10_000..=40_000).step_by(1_000) {
        coarse.extend(focus_sweep(&bench, v..=v, &cfg, 1).unwrap());
    }
    for (v, score) in &coarse {
        let bar = "#".repeat((score.sqrt() / 2.0) as usize);
        println!("v = {:>5.1} cm {bar}", bench.steps_to_cm(*v));
    }

    let rough = plateau_argmax(&coarse).unwrap();
    let fine = focus_sweep(&bench, rough - 1_000..=rough + 1_000, &cfg, 1).unwrap();
    let best = plateau_argmax(&fine).unwrap();
    println!("sharpest at v = {:.3} cm (step {best})", bench.steps_to_cm(best));
}
