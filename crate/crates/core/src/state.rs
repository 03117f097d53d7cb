use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::kinematics::{KinParams, NUM_LEGS};
use crate::so3::UnitQuaternion;

/// Gravity reaction in the world frame: a resting accelerometer reads `+G_W`.
pub const GRAVITY: f64 = 9.81;

pub fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY)
}

/// Per-keyframe estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion,
    /// World-frame body velocity.
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bw: Vector3<f64>,
    pub rho: [KinParams; NUM_LEGS],
}

impl RobotState {
    pub fn new(p: Vector3<f64>, q: UnitQuaternion, v: Vector3<f64>, calf: f64) -> Self {
        RobotState {
            p,
            q,
            v,
            ba: Vector3::zeros(),
            bw: Vector3::zeros(),
            rho: [KinParams::new(calf); NUM_LEGS],
        }
    }

    pub fn rho_vector(&self) -> [f64; NUM_LEGS] {
        self.rho.map(|r| r.calf_length)
    }
}
