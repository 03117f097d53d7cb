//! Visual-inertial-leg odometry for quadruped robots with online calibration
//! of leg kinematic parameters.

pub mod camera;
pub mod contact_filter;
pub mod error;
pub mod factor_graph;
pub mod harness;
pub mod imu_preint;
pub mod kinematics;
pub mod leg_preint;
pub mod simulator;
pub mod so3;
pub mod state;

pub use error::{Error, Result};
