//! Deterministic simulations of the two rigs: the focal-length optical bench
//! and the vanishing-rod refraction tank.
//!
//! Everything here is a pure function of its inputs. Rig states are plain
//! values; actuation lives in the device agent.

mod motor;
mod optics;
mod render;
mod sharpness;
mod state;

pub use motor::{steps_to_linear_mm, LinearDrive, MotorSpec};
pub use optics::{compute_focal_length, ideal_image_distance, percent_error, ImageDistance};
pub use render::{
    defocus_sigma_px, render_frame, rod_contrast, BeakerLayout, CameraView, RenderConfig,
    SideViewLayout, CONTRAST_REF_DELTA_MU,
};
pub use sharpness::{focus_sweep, plateau_argmax, sharpness_metric};
pub use state::{ExperimentKind, ExperimentState, LensBenchState, RodRigState};

use thiserror::Error;

/// Nominal focal length of the bench lens in centimetres.
///
/// The rated value is implied by the percentage errors reported for the
/// measured `(u, v)` pairs: 10.24 cm at 2.4 % error means a 10 cm lens.
pub const NOMINAL_FOCAL_LENGTH_CM: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid motor spec: {0}")]
    InvalidMotor(String),
    #[error("invalid rig state: {0}")]
    InvalidState(String),
    #[error("unknown camera `{0}`")]
    UnknownCamera(String),
}
