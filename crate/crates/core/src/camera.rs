//! Pinhole camera rigidly mounted on the body, optionally one of a
//! rectified stereo pair, and multi-view triangulation.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::so3::UnitQuaternion;

/// Camera frame: z forward, x right, y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub width: f64,
    pub height: f64,
    /// Camera origin in the body frame.
    pub p_bc: Vector3<f64>,
    /// Camera-to-body rotation.
    pub q_bc: UnitQuaternion,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Offset of a second camera along this camera's x axis, metres.
    /// Zero for a single camera.
    pub baseline: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            width: 640.0,
            height: 480.0,
            p_bc: Vector3::new(0.25, 0.0, 0.05),
            q_bc: forward_looking(),
            min_depth: 0.3,
            max_depth: 20.0,
            baseline: 0.05,
        }
    }
}

/// Camera axes expressed in the body frame: z along body x, x along -y,
/// y along -z.
pub fn forward_looking() -> UnitQuaternion {
    // Columns are the camera axes in body coordinates.
    let m = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let r = nalgebra::Rotation3::from_matrix_unchecked(m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
    UnitQuaternion::new(q.w, Vector3::new(q.i, q.j, q.k))
}

impl CameraModel {
    /// The second camera of the pair, as a camera of its own.
    pub fn right(&self) -> Option<CameraModel> {
        (self.baseline != 0.0).then(|| CameraModel {
            p_bc: self.p_bc + self.rotation_bc() * Vector3::new(self.baseline, 0.0, 0.0),
            baseline: 0.0,
            ..*self
        })
    }

    /// This camera, or its stereo partner.
    pub fn view(&self, right: bool) -> CameraModel {
        if right {
            self.right().unwrap_or(*self)
        } else {
            *self
        }
    }

    pub fn rotation_bc(&self) -> Matrix3<f64> {
        self.q_bc.rotation_matrix()
    }

    /// Landmark in the camera frame for body pose `(p, q)`.
    pub fn to_camera(&self, p: &Vector3<f64>, q: &UnitQuaternion, l: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_bc().transpose() * (q.inverse_rotate(&(l - p)) - self.p_bc)
    }

    /// Camera centre and rotation (camera to world) for a body pose.
    pub fn world_pose(&self, p: &Vector3<f64>, q: &UnitQuaternion) -> (Vector3<f64>, Matrix3<f64>) {
        let r = q.rotation_matrix();
        (p + r * self.p_bc, r * self.rotation_bc())
    }

    /// Normalized image coordinates, or `None` outside the depth range.
    pub fn project(&self, l_c: &Vector3<f64>) -> Option<Vector2<f64>> {
        if l_c.z < self.min_depth || l_c.z > self.max_depth {
            return None;
        }
        Some(Vector2::new(l_c.x / l_c.z, l_c.y / l_c.z))
    }

    pub fn in_view(&self, n: &Vector2<f64>) -> bool {
        (n.x * self.fx).abs() <= 0.5 * self.width && (n.y * self.fy).abs() <= 0.5 * self.height
    }

    /// Normalized-plane standard deviation of a one-pixel error.
    pub fn normalized_sigma(&self, pixel_sigma: f64) -> f64 {
        pixel_sigma / self.fx.min(self.fy)
    }
}

/// One bearing: camera centre, camera-to-world rotation and normalized
/// image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Bearing {
    pub center: Vector3<f64>,
    pub rot_wc: Matrix3<f64>,
    pub obs: Vector2<f64>,
}

impl Bearing {
    pub fn direction(&self) -> Vector3<f64> {
        (self.rot_wc * Vector3::new(self.obs.x, self.obs.y, 1.0)).normalize()
    }
}

/// Least-squares intersection of bearing rays (midpoint method).
pub fn triangulate(views: &[Bearing]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for v in views {
        let d = v.direction();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * v.center;
    }
    let x = a.cholesky()?.solve(&b);
    x.iter().all(|c| c.is_finite()).then_some(x)
}

/// Largest angle between any two rays, radians.
pub fn max_parallax(views: &[Bearing]) -> f64 {
    let dirs: Vec<_> = views.iter().map(|v| v.direction()).collect();
    let mut best: f64 = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            best = best.max(dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0).acos());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_conventions() {
        let cam = CameraModel::default();
        let r = cam.rotation_bc();
        assert!((r * Vector3::z() - Vector3::x()).norm() < 1e-15);
        assert!((r * Vector3::x() + Vector3::y()).norm() < 1e-15);
        assert!((r * Vector3::y() + Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn optical_axis_projects_to_origin() {
        let cam = CameraModel::default();
        let p = Vector3::new(1.0, -2.0, 0.3);
        let q = UnitQuaternion::from_yaw_pitch_roll(0.7, 0.05, -0.02);
        let (c, r) = cam.world_pose(&p, &q);
        for depth in [0.5, 3.0, 17.0] {
            let l = c + r * Vector3::new(0.0, 0.0, depth);
            let n = cam.project(&cam.to_camera(&p, &q, &l)).unwrap();
            assert!(n.norm() < 1e-12);
        }
        let behind = c - r * Vector3::new(0.0, 0.0, 2.0);
        assert!(cam.project(&cam.to_camera(&p, &q, &behind)).is_none());
    }

    #[test]
    fn stereo_partner_sees_shifted_point() {
        let cam = CameraModel::default();
        let right = cam.right().unwrap();
        let p = Vector3::new(0.4, 0.1, 0.3);
        let q = UnitQuaternion::from_yaw_pitch_roll(0.3, 0.0, 0.0);
        let l = p + q.rotate(&Vector3::new(4.0, -0.5, 0.2));
        let (a, b) = (cam.to_camera(&p, &q, &l), right.to_camera(&p, &q, &l));
        assert!((a - b - Vector3::new(cam.baseline, 0.0, 0.0)).norm() < 1e-12);
        // Disparity is f·b/z.
        let d = (cam.project(&a).unwrap().x - right.project(&b).unwrap().x) * cam.fx;
        assert!((d - cam.fx * cam.baseline / a.z).abs() < 1e-9);
        let mono = CameraModel { baseline: 0.0, ..cam };
        assert!(mono.right().is_none());
        assert_eq!(mono.view(true), mono);
    }

    #[test]
    fn two_view_triangulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = CameraModel::default();
        for _ in 0..100 {
            let l = Vector3::new(
                rng.random_range(3.0..8.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.5..1.5),
            );
            let views: Vec<_> = (0..2)
                .map(|k| {
                    let p = Vector3::new(0.3 * k as f64, rng.random_range(-0.2..0.2), 0.3);
                    let q = UnitQuaternion::from_yaw_pitch_roll(rng.random_range(-0.2..0.2), 0.0, 0.0);
                    let (center, rot_wc) = cam.world_pose(&p, &q);
                    let obs = cam.project(&cam.to_camera(&p, &q, &l)).unwrap();
                    Bearing { center, rot_wc, obs }
                })
                .collect();
            let x = triangulate(&views).unwrap();
            assert!((x - l).norm() < 1e-9, "{}", (x - l).norm());
            assert!(max_parallax(&views) > 0.0);
        }
    }
}
