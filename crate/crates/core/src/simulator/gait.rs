//! Trot schedule, foot trajectories, slip events and closed-form leg IK.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::path::Trajectory;
use crate::error::{Error, Result};
use crate::kinematics::{leg_jacobian, KinParams, LegGeometry, NUM_LEGS};

/// Phase offsets: FL and RR together, FR and RL half a period later.
pub const TROT_OFFSETS: [f64; NUM_LEGS] = [0.0, 0.5, 0.5, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfig {
    pub frequency: f64,
    pub duty: f64,
    pub swing_height: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig {
            frequency: 2.0,
            duty: 0.5,
            swing_height: 0.05,
        }
    }
}

impl GaitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) || !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(Error::Config(format!(
                "gait needs frequency > 0 and duty in (0, 1), got {self:?}"
            )));
        }
        Ok(())
    }

    fn cycle(&self, leg: usize, t: f64) -> (i64, f64) {
        let x = t * self.frequency + TROT_OFFSETS[leg];
        let n = x.floor();
        (n as i64, x - n)
    }

    /// Start time of stance cycle `n`.
    pub fn stance_start(&self, leg: usize, n: i64) -> f64 {
        (n as f64 - TROT_OFFSETS[leg]) / self.frequency
    }

    pub fn stance_duration(&self) -> f64 {
        self.duty / self.frequency
    }
}

pub fn gait_schedule(cfg: &GaitConfig, t: f64) -> [bool; NUM_LEGS] {
    std::array::from_fn(|leg| cfg.cycle(leg, t).1 < cfg.duty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipEvent {
    pub leg: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// World-frame foot velocity while slipping.
    pub velocity: [f64; 3],
}

impl SlipEvent {
    pub fn active(&self, leg: usize, t: f64) -> bool {
        self.leg == leg && t >= self.t_start && t < self.t_end
    }

    fn offset(&self, t: f64) -> Vector3<f64> {
        let dt = (t.min(self.t_end) - self.t_start).max(0.0);
        Vector3::from(self.velocity) * dt
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FootState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub stance: bool,
    pub slipping: bool,
}

/// World-frame foot motion for all legs.
#[derive(Debug, Clone)]
pub struct FootPlanner<'a> {
    pub traj: &'a Trajectory,
    pub gait: GaitConfig,
    pub geoms: [LegGeometry; NUM_LEGS],
    pub slips: Vec<SlipEvent>,
}

impl FootPlanner<'_> {
    /// Nominal foothold of stance cycle `n`: the hip projected to the
    /// ground at mid-stance.
    pub fn foothold(&self, leg: usize, n: i64) -> Vector3<f64> {
        let t_mid = self.gait.stance_start(leg, n) + 0.5 * self.gait.stance_duration();
        let b = self.traj.body(t_mid);
        let g = &self.geoms[leg];
        let (c, s) = (b.yaw.cos(), b.yaw.sin());
        let (x, y) = (g.hip_offset[0], g.hip_offset[1] + g.lateral());
        Vector3::new(b.p.x + c * x - s * y, b.p.y + s * x + c * y, 0.0)
    }

    fn stance_slip(&self, leg: usize, n: i64) -> Option<&SlipEvent> {
        let t0 = self.gait.stance_start(leg, n);
        let t1 = t0 + self.gait.stance_duration();
        self.slips
            .iter()
            .find(|e| e.leg == leg && e.t_start >= t0 && e.t_start < t1)
    }

    /// Foot position during stance `n` including any slip displacement.
    fn stance_foot(&self, leg: usize, n: i64, t: f64) -> (Vector3<f64>, Vector3<f64>, bool) {
        let f = self.foothold(leg, n);
        match self.stance_slip(leg, n) {
            Some(e) => {
                let active = e.active(leg, t);
                let vel = if active { Vector3::from(e.velocity) } else { Vector3::zeros() };
                (f + e.offset(t), vel, active)
            }
            None => (f, Vector3::zeros(), false),
        }
    }

    pub fn foot(&self, leg: usize, t: f64) -> FootState {
        let (n, phase) = self.gait.cycle(leg, t);
        let duty = self.gait.duty;
        if phase < duty {
            let (pos, vel, slipping) = self.stance_foot(leg, n, t);
            return FootState {
                pos,
                vel,
                stance: true,
                slipping,
            };
        }
        let t_lift = self.gait.stance_start(leg, n) + self.gait.stance_duration();
        let (start, _, _) = self.stance_foot(leg, n, t_lift);
        let end = self.foothold(leg, n + 1);
        let u = (phase - duty) / (1.0 - duty);
        let du = self.gait.frequency / (1.0 - duty);
        // Horizontal blend and lift both have zero velocity at lift-off
        // and touch-down.
        let sigma = u - (TAU * u).sin() / TAU;
        let dsigma = 1.0 - (TAU * u).cos();
        let h = self.gait.swing_height;
        let lift = h * (PI * u).sin().powi(2);
        let dlift = h * PI * (TAU * u).sin();
        let d = end - start;
        FootState {
            pos: start + d * sigma + Vector3::new(0.0, 0.0, lift),
            vel: (d * dsigma + Vector3::new(0.0, 0.0, dlift)) * du,
            stance: false,
            slipping: false,
        }
    }
}

/// Joint angles placing the foot at `foot_body`, knee-backward branch.
pub fn inverse_kinematics(geom: &LegGeometry, foot_body: &Vector3<f64>, rho: &KinParams) -> Result<Vector3<f64>> {
    let f = foot_body - geom.hip();
    let lat = geom.lateral();
    let (lt, lc) = (geom.thigh_length, rho.calf_length);
    let yz2 = f.y * f.y + f.z * f.z;
    if yz2 < lat * lat {
        return Err(Error::Unreachable(format!(
            "foot {foot_body:?} inside the abduction offset"
        )));
    }
    // Foot height in the thigh plane; the foot hangs below the hip.
    let z = -(yz2 - lat * lat).sqrt();
    let phi0 = f.z.atan2(f.y) - z.atan2(lat);
    let (x, z) = (f.x, z);
    let d2 = x * x + z * z;
    let d = d2.sqrt();
    let tol = 1e-12;
    if d > lt + lc + tol || d < (lt - lc).abs() - tol {
        return Err(Error::Unreachable(format!(
            "foot distance {d:.6} outside [{:.6}, {:.6}]",
            (lt - lc).abs(),
            lt + lc
        )));
    }
    let c2 = ((d2 - lt * lt - lc * lc) / (2.0 * lt * lc)).clamp(-1.0, 1.0);
    let phi2 = -c2.acos();
    let (k1, k2) = (lt + lc * c2, lc * phi2.sin());
    let phi1 = (-x).atan2(-z) - k2.atan2(k1);
    let wrap = |a: f64| (a + PI).rem_euclid(TAU) - PI;
    Ok(Vector3::new(wrap(phi0), wrap(phi1), phi2))
}

/// Joint rates producing body-frame foot velocity `dfoot`.
pub fn joint_rates(
    geom: &LegGeometry,
    phi: &Vector3<f64>,
    rho: &KinParams,
    dfoot: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let j: Matrix3<f64> = leg_jacobian(geom, phi, rho);
    j.lu()
        .solve(dfoot)
        .ok_or_else(|| Error::Unreachable("singular leg Jacobian".into()))
}
