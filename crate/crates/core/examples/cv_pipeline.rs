//! The tester's vision stages on rendered frames: background subtraction,
//! blob boxes, displacement tracking and the SSIM water-level check.
//!
//! Run with `cargo run -p rlabs-core --example cv_pipeline`.

use rlabs_core::cv::{detect_moves, ssim, track_displacement, CvParams};
use rlabs_core::physics::{render_frame, ExperimentState, LensBenchState, RenderConfig, RodRigState};

fn main() {
    let cfg = RenderConfig::default();
    let bench = LensBenchState::default();
    let moved = LensBenchState {
        u_steps: bench.u_steps - 300,
        v_steps: bench.v_steps + 500,
        ..bench.clone()
    };
    let before = render_frame(&ExperimentState::FocalLength(bench), "side", &cfg, 1, 0).unwrap();
    let after = render_frame(&ExperimentState::FocalLength(moved), "side", &cfg, 2, 0).unwrap();
    let moves = detect_moves(&before.image, &after.image, cfg.side.tracking_roi(&cfg), &CvParams::default()).unwrap();
    println!("vacated boxes: {:?}", moves.vacated.iter().map(|b| (b.x, b.y, b.w, b.h)).collect::<Vec<_>>());
    println!("appeared boxes: {:?}", moves.appeared.iter().map(|b| (b.x, b.y, b.w, b.h)).collect::<Vec<_>>());
    for t in track_displacement(&moves.vacated, &moves.appeared, 0.125).unwrap().tracks {
        println!("carriage at x = {} moved {:+.2} mm", t.before.x, t.dx_mm);
    }

    let rig = RodRigState::default();
    let low = RodRigState {
        water_level: 0.8,
        ..rig.clone()
    };
    let crop = cfg.beakers.water_crop();
    let full = render_frame(&ExperimentState::VanishingRod(rig.clone()), "beakers", &cfg, 3, 0).unwrap();
    let again = render_frame(&ExperimentState::VanishingRod(rig), "beakers", &cfg, 4, 0).unwrap();
    let evaporated = render_frame(&ExperimentState::VanishingRod(low), "beakers", &cfg, 5, 0).unwrap();
    let reference = full.image.crop_roi(crop);
    println!("SSIM reference vs fresh frame: {:.4}", ssim(&reference, &again.image.crop_roi(crop)).unwrap());
    println!("SSIM reference vs evaporated: {:.4}", ssim(&reference, &evaporated.image.crop_roi(crop)).unwrap());
}
