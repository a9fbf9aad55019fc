use serde::{Deserialize, Serialize};

use super::{LinearDrive, MotorSpec, PhysicsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentKind {
    /// Focal length of a convex lens on an optical bench.
    #[serde(rename = "FL")]
    FocalLength,
    /// Glass rods vanishing in a liquid of matching refractive index.
    #[serde(rename = "VR")]
    VanishingRod,
}

/// Optical bench with the lens fixed at the origin. Positions are the true
/// mechanical positions of the carriages, which may differ from what the
/// controller believes after a stall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensBenchState {
    /// Object-platform offset from the lens, in steps.
    pub u_steps: u32,
    /// Screen-platform offset from the lens, in steps.
    pub v_steps: u32,
    pub step_len_um: f64,
    pub focal_len_cm: f64,
    pub bench_half_len_cm: f64,
    pub light_on: bool,
}

impl Default for LensBenchState {
    fn default() -> Self {
        Self {
            u_steps: 20_000,
            v_steps: 20_000,
            step_len_um: 10.0,
            focal_len_cm: 10.0,
            bench_half_len_cm: 50.0,
            light_on: true,
        }
    }
}

impl LensBenchState {
    pub fn u_cm(&self) -> f64 {
        self.steps_to_cm(self.u_steps)
    }

    pub fn v_cm(&self) -> f64 {
        self.steps_to_cm(self.v_steps)
    }

    pub fn steps_to_cm(&self, steps: u32) -> f64 {
        steps as f64 * self.step_len_um / 10_000.0
    }

    pub fn cm_to_steps(&self, cm: f64) -> u32 {
        (cm * 10_000.0 / self.step_len_um).round().max(0.0) as u32
    }

    /// Largest reachable offset on either side of the lens, in steps.
    pub fn max_steps(&self) -> u32 {
        (self.bench_half_len_cm * 10_000.0 / self.step_len_um).floor() as u32
    }

    pub fn drive(&self) -> LinearDrive {
        LinearDrive::Leadscrew {
            step_len_um: self.step_len_um,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.step_len_um > 0.0 && self.focal_len_cm > 0.0 && self.bench_half_len_cm > 0.0) {
            return Err(PhysicsError::InvalidState(
                "step length, focal length and bench length must be positive".into(),
            ));
        }
        let max = self.max_steps();
        if self.u_steps > max || self.v_steps > max {
            return Err(PhysicsError::InvalidState(format!(
                "platform beyond bench end: u={} v={} max={max}",
                self.u_steps, self.v_steps
            )));
        }
        Ok(())
    }
}

/// Rod rig: two glass rods on a shared pulley lowered into an oil beaker and a
/// water beaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RodRigState {
    /// Motor position; 0 is fully raised.
    pub rod_height_steps: u32,
    pub motor: MotorSpec,
    pub pulley_radius_mm: f64,
    pub mu_rod: f64,
    pub mu_oil: f64,
    pub mu_water: f64,
    pub mu_air: f64,
    /// Gap between the rod tips and the liquid surface when fully raised.
    pub liquid_gap_mm: f64,
    /// Immersion depth at which a rod counts as fully submerged.
    pub immersion_depth_mm: f64,
    pub max_travel_steps: u32,
    /// Liquid levels as a fraction of the filled level (evaporation lowers them).
    pub oil_level: f64,
    pub water_level: f64,
}

impl Default for RodRigState {
    fn default() -> Self {
        Self {
            rod_height_steps: 0,
            motor: MotorSpec::BYJ48,
            pulley_radius_mm: 10.0,
            mu_rod: 1.5,
            mu_oil: 1.47,
            mu_water: 1.36,
            mu_air: 1.0,
            liquid_gap_mm: 5.0,
            immersion_depth_mm: 25.0,
            max_travel_steps: 2048,
            oil_level: 1.0,
            water_level: 1.0,
        }
    }
}

impl RodRigState {
    pub fn drive(&self) -> LinearDrive {
        LinearDrive::Pulley {
            motor: self.motor,
            radius_mm: self.pulley_radius_mm,
        }
    }

    /// How far the rods have been lowered, in millimetres.
    pub fn travel_mm(&self) -> f64 {
        self.drive().displacement_mm(self.rod_height_steps as u64)
    }

    pub fn submerged_fraction(&self) -> f64 {
        ((self.travel_mm() - self.liquid_gap_mm) / self.immersion_depth_mm).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.motor.validate()?;
        for (name, mu) in [
            ("rod", self.mu_rod),
            ("oil", self.mu_oil),
            ("water", self.mu_water),
            ("air", self.mu_air),
        ] {
            if !(mu >= 1.0) {
                return Err(PhysicsError::InvalidState(format!(
                    "refractive index of {name} must be >= 1, got {mu}"
                )));
            }
        }
        if self.rod_height_steps > self.max_travel_steps {
            return Err(PhysicsError::InvalidState(format!(
                "rod position {} beyond travel {}",
                self.rod_height_steps, self.max_travel_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.oil_level) || !(0.0..=1.0).contains(&self.water_level) {
            return Err(PhysicsError::InvalidState("liquid levels must be within [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ExperimentState {
    #[serde(rename = "FL")]
    FocalLength(LensBenchState),
    #[serde(rename = "VR")]
    VanishingRod(RodRigState),
}

impl ExperimentState {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentState::FocalLength(_) => ExperimentKind::FocalLength,
            ExperimentState::VanishingRod(_) => ExperimentKind::VanishingRod,
        }
    }

    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::FocalLength => ExperimentState::FocalLength(LensBenchState::default()),
            ExperimentKind::VanishingRod => ExperimentState::VanishingRod(RodRigState::default()),
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        match self {
            ExperimentState::FocalLength(s) => s.validate(),
            ExperimentState::VanishingRod(s) => s.validate(),
        }
    }

    /// Stable digest of the state, used to derive per-scene noise seeds.
    pub fn digest(&self) -> u64 {
        // FNV-1a over the canonical JSON encoding
        let text = serde_json::to_string(self).unwrap_or_default();
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}
