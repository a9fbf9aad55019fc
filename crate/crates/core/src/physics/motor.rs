use serde::{Deserialize, Serialize};

use super::PhysicsError;

/// Stepper motor characteristics. `step_angle_deg` is the effective angle
/// after micro-stepping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorSpec {
    pub step_angle_deg: f64,
    pub steps_per_rev: u32,
    pub max_step_rate: u32,
}

impl MotorSpec {
    /// 28BYJ-48 geared stepper used on the rod rig.
    pub const BYJ48: MotorSpec = MotorSpec {
        step_angle_deg: 0.0875,
        steps_per_rev: 4114,
        max_step_rate: 500,
    };

    /// NEMA 17 (1.8°) behind an A4988 in half-step mode: 400 steps/rev.
    pub const NEMA17_HALF_STEP: MotorSpec = MotorSpec {
        step_angle_deg: 0.9,
        steps_per_rev: 400,
        max_step_rate: 4000,
    };

    pub fn new(step_angle_deg: f64, steps_per_rev: u32, max_step_rate: u32) -> Result<Self, PhysicsError> {
        let spec = Self {
            step_angle_deg,
            steps_per_rev,
            max_step_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.step_angle_deg > 0.0) {
            return Err(PhysicsError::InvalidMotor(format!(
                "step angle must be positive, got {}",
                self.step_angle_deg
            )));
        }
        let full_turn = self.steps_per_rev as f64 * self.step_angle_deg;
        if (full_turn - 360.0).abs() > 0.5 {
            return Err(PhysicsError::InvalidMotor(format!(
                "{} steps x {} deg = {full_turn} deg, not one revolution",
                self.steps_per_rev, self.step_angle_deg
            )));
        }
        if self.max_step_rate == 0 {
            return Err(PhysicsError::InvalidMotor("max step rate must be positive".into()));
        }
        Ok(())
    }

    /// Time to execute `steps` at the maximum step rate, rounded up.
    pub fn move_duration_ms(&self, steps: u64) -> u64 {
        (steps * 1000).div_ceil(self.max_step_rate as u64)
    }
}

/// Converts motor steps into linear carriage travel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearDrive {
    /// Screw shaft with a fixed travel per step.
    Leadscrew { step_len_um: f64 },
    /// String wound on a pulley: arc length per step.
    Pulley { motor: MotorSpec, radius_mm: f64 },
}

impl LinearDrive {
    pub fn displacement_mm(&self, steps: u64) -> f64 {
        match *self {
            LinearDrive::Leadscrew { step_len_um } => steps_to_linear_mm(steps, step_len_um),
            LinearDrive::Pulley { motor, radius_mm } => {
                steps as f64 * motor.step_angle_deg.to_radians() * radius_mm
            }
        }
    }
}

/// Linear travel of a leadscrew carriage, in millimetres.
pub fn steps_to_linear_mm(steps: u64, step_len_um: f64) -> f64 {
    steps as f64 * step_len_um / 1000.0
}
