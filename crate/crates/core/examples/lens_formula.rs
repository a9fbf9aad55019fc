//! Focal length and percent error from measured object/image distances.
//!
//! Run with `cargo run -p rlabs-core --example lens_formula`.

use rlabs_core::physics::{compute_focal_length, ideal_image_distance, percent_error, NOMINAL_FOCAL_LENGTH_CM};

fn main() {
    let measured = [(20.59, 20.38), (29.5, 15.89), (42.65, 13.95)];
    println!("{:>8} {:>8} {:>8} {:>8}", "u (cm)", "v (cm)", "f (cm)", "error %");
    for (u, v) in measured {
        let f = compute_focal_length(u, v).expect("positive distances");
        let err = percent_error(f, NOMINAL_FOCAL_LENGTH_CM).expect("nominal is positive");
        println!("{u:>8.2} {v:>8.2} {f:>8.2} {err:>8.1}");
    }

    // where the screen should sit for a few object distances
    for u in [15.0, 20.0, 30.0, 10.0] {
        match ideal_image_distance(u, NOMINAL_FOCAL_LENGTH_CM).expect("positive distances").finite() {
            Some(v) => println!("u = {u:>4} cm -> sharp image at v = {v:.2} cm"),
            None => println!("u = {u:>4} cm -> no real image"),
        }
    }
}
