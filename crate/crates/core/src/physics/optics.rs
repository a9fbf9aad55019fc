use serde::{Deserialize, Serialize};

use super::PhysicsError;

/// Image distance for an object at `u`: either a real image at a finite
/// distance or no real image at all (object at or inside the focal point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ImageDistance {
    Finite(f64),
    AtInfinity,
}

impl ImageDistance {
    pub fn finite(self) -> Option<f64> {
        match self {
            ImageDistance::Finite(v) => Some(v),
            ImageDistance::AtInfinity => None,
        }
    }
}

/// Thin-lens focal length from object and image distances, both taken as
/// positive magnitudes: `1/f = 1/u + 1/v`.
pub fn compute_focal_length(u_cm: f64, v_cm: f64) -> Result<f64, PhysicsError> {
    if !(u_cm > 0.0 && v_cm > 0.0) || !u_cm.is_finite() || !v_cm.is_finite() {
        return Err(PhysicsError::Domain(format!(
            "distances must be positive, got u={u_cm}, v={v_cm}"
        )));
    }
    Ok(1.0 / (1.0 / u_cm + 1.0 / v_cm))
}

pub fn percent_error(f_measured: f64, f_nominal: f64) -> Result<f64, PhysicsError> {
    if !(f_nominal > 0.0) {
        return Err(PhysicsError::Domain(format!(
            "nominal focal length must be positive, got {f_nominal}"
        )));
    }
    Ok(100.0 * (f_measured - f_nominal).abs() / f_nominal)
}

/// Solves the lens equation for `v`.
pub fn ideal_image_distance(u_cm: f64, f_cm: f64) -> Result<ImageDistance, PhysicsError> {
    if !(u_cm > 0.0) {
        return Err(PhysicsError::Domain(format!(
            "object distance must be positive, got {u_cm}"
        )));
    }
    if !(f_cm > 0.0) {
        return Err(PhysicsError::Domain(format!(
            "focal length must be positive, got {f_cm}"
        )));
    }
    if u_cm <= f_cm {
        return Ok(ImageDistance::AtInfinity);
    }
    Ok(ImageDistance::Finite(1.0 / (1.0 / f_cm - 1.0 / u_cm)))
}
