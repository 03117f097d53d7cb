//! Reprojection residual on the normalized image plane.

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};

use crate::camera::CameraModel;
use crate::so3::skew;
use crate::state::RobotState;

/// Observations closer than this along the optical axis are dropped.
pub const MIN_DEPTH: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct VisionTerm {
    pub residual: Vector2<f64>,
    /// With respect to `[δp, δθ]` of the observing keyframe.
    pub d_pose: SMatrix<f64, 2, 6>,
    pub d_landmark: Matrix2x3<f64>,
}

/// `π(l_c) − obs`, or `None` when the landmark sits behind the camera.
pub fn vision_residual(
    x: &RobotState,
    landmark: &Vector3<f64>,
    obs: &Vector2<f64>,
    cam: &CameraModel,
) -> Option<VisionTerm> {
    let r_bc_t = cam.rotation_bc().transpose();
    let rq_t = x.q.rotation_matrix().transpose();
    let l_b = rq_t * (landmark - x.p);
    let l_c = r_bc_t * (l_b - cam.p_bc);
    if l_c.z < MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / l_c.z;
    let proj = Vector2::new(l_c.x * iz, l_c.y * iz);
    let dpi = Matrix2x3::new(iz, 0.0, -l_c.x * iz * iz, 0.0, iz, -l_c.y * iz * iz);
    let a = dpi * r_bc_t;
    let mut d_pose = SMatrix::<f64, 2, 6>::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-a * rq_t));
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(a * skew(&l_b)));
    Some(VisionTerm {
        residual: proj - obs,
        d_pose,
        d_landmark: a * rq_t,
    })
}

/// Square root of the Huber weight for a whitened residual of norm `n`.
pub fn huber_sqrt_weight(n: f64, k: f64) -> f64 {
    if n <= k {
        1.0
    } else {
        (k / n).sqrt()
    }
}

/// Huber cost matching [`huber_sqrt_weight`], in squared-norm units.
pub fn huber_cost(n: f64, k: f64) -> f64 {
    if n <= k {
        n * n
    } else {
        2.0 * k * n - k * k
    }
}
