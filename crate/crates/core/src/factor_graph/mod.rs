//! Sliding-window smoother over IMU, leg, vision and prior factors.

mod estimator;
mod vision;
mod window;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contact_filter::FilterConfig;
use crate::error::{Error, Result};
use crate::imu_preint::ImuNoise;
use crate::leg_preint::LegNoise;

pub use estimator::{run_estimator, EstimatorOutput, TrajectoryPoint};
pub use vision::{huber_cost, huber_sqrt_weight, vision_residual, VisionTerm, MIN_DEPTH};
pub use window::{
    retract, state_dim, Feature, Interval, Keyframe, Prior, SlidingWindow, SolveReport, WindowParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorMode {
    /// IMU and leg odometry in the contact filter, no camera.
    #[serde(rename = "kf")]
    Kf,
    #[serde(rename = "vio")]
    Vio,
    /// Leg factors with calf lengths frozen at nominal.
    #[serde(rename = "vilo")]
    ViloFixed,
    #[serde(rename = "vilo-calib")]
    ViloCalib,
}

impl EstimatorMode {
    pub const ALL: [EstimatorMode; 4] = [
        EstimatorMode::Kf,
        EstimatorMode::Vio,
        EstimatorMode::ViloFixed,
        EstimatorMode::ViloCalib,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::Kf => "kf",
            EstimatorMode::Vio => "vio",
            EstimatorMode::ViloFixed => "vilo",
            EstimatorMode::ViloCalib => "vilo-calib",
        }
    }

    pub fn uses_vision(self) -> bool {
        self != EstimatorMode::Kf
    }

    pub fn uses_legs(self) -> bool {
        matches!(self, EstimatorMode::ViloFixed | EstimatorMode::ViloCalib)
    }

    pub fn calibrates(self) -> bool {
        self == EstimatorMode::ViloCalib
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (expected kf, vio, vilo or vilo-calib)")))
    }
}

/// Standard deviations of the prior on the first keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSigmas {
    pub p: f64,
    pub theta: f64,
    pub v: f64,
    pub ba: f64,
    pub bw: f64,
    pub rho: f64,
}

impl Default for PriorSigmas {
    fn default() -> Self {
        PriorSigmas {
            p: 1e-3,
            theta: 1e-3,
            v: 1e-2,
            ba: 5e-2,
            bw: 5e-3,
            rho: 5e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Maximum number of keyframes kept in the window.
    pub window_size: usize,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    /// Stop once the cost falls below this value.
    pub abs_tol: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Huber threshold on whitened reprojection residuals.
    pub huber: f64,
    /// Reprojection noise assumed by the estimator, pixels.
    pub pixel_sigma: f64,
    /// Minimum ray angle before a landmark is triangulated, degrees.
    pub min_parallax_deg: f64,
    /// Keep landmarks seen by a marginalized keyframe as variables of the
    /// prior. Loses no information but makes the prior, and every solve,
    /// dense in those landmarks.
    pub prior_landmarks: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            window_size: 10,
            max_iterations: 10,
            rel_tol: 1e-8,
            abs_tol: 1e-14,
            lambda_init: 1e-4,
            lambda_max: 1e10,
            huber: 1.0,
            pixel_sigma: 1.0,
            min_parallax_deg: 1.0,
            prior_landmarks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub solver: SolverConfig,
    pub prior: PriorSigmas,
    pub imu_noise: ImuNoise,
    pub leg_noise: LegNoise,
    pub contact: FilterConfig,
    /// Revert sensor contact flags that fail the filter's innovation gate.
    pub reject_outliers: bool,
    /// Initial calf length; the dataset's nominal value when unset.
    pub calf_init: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            solver: SolverConfig::default(),
            prior: PriorSigmas::default(),
            imu_noise: ImuNoise::default(),
            leg_noise: LegNoise::default(),
            contact: FilterConfig::default(),
            reject_outliers: true,
            calf_init: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.imu_noise.validate()?;
        self.leg_noise.validate()?;
        let n = &self.imu_noise;
        if [n.sigma_a, n.sigma_w, n.sigma_ba, n.sigma_bw].iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("estimator IMU noise must be strictly positive".into()));
        }
        let s = &self.solver;
        if s.window_size < 2 || s.max_iterations == 0 {
            return Err(Error::Config("window_size must be >= 2 and max_iterations >= 1".into()));
        }
        if !(s.pixel_sigma > 0.0 && s.huber > 0.0 && s.lambda_init > 0.0 && s.lambda_max > s.lambda_init) {
            return Err(Error::Config("solver pixel_sigma, huber and damping must be positive".into()));
        }
        let p = &self.prior;
        if [p.p, p.theta, p.v, p.ba, p.bw, p.rho].iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("prior sigmas must be positive".into()));
        }
        if !(self.contact.gate > 0.0 && self.contact.sigma_v > 0.0) {
            return Err(Error::Config("contact gate and sigma_v must be positive".into()));
        }
        Ok(())
    }
}
