//! Parametric 3-DOF leg model.
//!
//! The foot position in the body frame is produced by the chain
//!
//! ```text
//! g(φ, ρ) = hip + Rx(φ₀) · ( [0, s·d, 0]
//!                          + Ry(φ₁) · ( [0, 0, -l_t]
//!                                     + Ry(φ₂) · [0, 0, -ρ] ) )
//! ```
//!
//! with `φ = [abduction, hip pitch, knee pitch]`, `s` the side sign, `d` the
//! abduction offset, `l_t` the thigh length and `ρ` the calf length. At zero
//! angles the leg points straight down. This chain is the one model shared by
//! the simulator and every estimator, and the reference for all derivative
//! checks below.
//!
//! Only the calf length is calibrated. `g` is affine in it, which the tests
//! exploit to get exact parameter derivatives without finite differences.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::so3::UnitQuaternion;

pub const NUM_LEGS: usize = 4;
pub const LEG_NAMES: [&str; NUM_LEGS] = ["fl", "fr", "rl", "rr"];

/// Lower/upper calf-length plausibility bounds in metres.
pub const CALF_MIN: f64 = 0.05;
pub const CALF_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegGeometry {
    /// Hip joint origin in the body frame.
    pub hip_offset: [f64; 3],
    /// Lateral distance from the abduction axis to the thigh plane.
    pub abduction_offset: f64,
    pub thigh_length: f64,
    pub calf_length_nominal: f64,
    /// +1 for left legs, -1 for right legs.
    pub side_sign: f64,
}

impl LegGeometry {
    pub fn hip(&self) -> Vector3<f64> {
        Vector3::from(self.hip_offset)
    }

    /// Signed lateral offset `s·d`.
    pub fn lateral(&self) -> f64 {
        self.side_sign * self.abduction_offset
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.thigh_length > 0.0 && self.calf_length_nominal > 0.0) {
            return Err("link lengths must be positive".into());
        }
        if self.side_sign != 1.0 && self.side_sign != -1.0 {
            return Err(format!("side_sign must be ±1, got {}", self.side_sign));
        }
        if self.abduction_offset < 0.0 {
            return Err("abduction_offset is a magnitude and must be non-negative".into());
        }
        Ok(())
    }

    /// A1-sized quadruped, legs ordered FL, FR, RL, RR.
    pub fn a1_like(calf_nominal: f64) -> [LegGeometry; NUM_LEGS] {
        let hx = 0.183;
        let hy = 0.047;
        let mk = |x: f64, y: f64, s: f64| LegGeometry {
            hip_offset: [x, y, 0.0],
            abduction_offset: 0.085,
            thigh_length: 0.2,
            calf_length_nominal: calf_nominal,
            side_sign: s,
        };
        [
            mk(hx, hy, 1.0),
            mk(hx, -hy, -1.0),
            mk(-hx, hy, 1.0),
            mk(-hx, -hy, -1.0),
        ]
    }
}

/// Joint angles and rates of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub phi: [f64; 3],
    pub dphi: [f64; 3],
}

impl JointState {
    pub fn angles(&self) -> Vector3<f64> {
        Vector3::from(self.phi)
    }

    pub fn rates(&self) -> Vector3<f64> {
        Vector3::from(self.dphi)
    }
}

/// Calibrated kinematic parameters of one leg (the calf length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinParams {
    pub calf_length: f64,
}

impl KinParams {
    pub const DIM: usize = 1;

    pub fn new(calf_length: f64) -> Self {
        KinParams { calf_length }
    }

    /// Clamped into the physically plausible range.
    pub fn clamped(self) -> Self {
        KinParams {
            calf_length: self.calf_length.clamp(CALF_MIN, CALF_MAX),
        }
    }
}

struct ChainTerms {
    s0: f64,
    c0: f64,
    s12: f64,
    c12: f64,
    /// Planar foot coordinates relative to the thigh plane origin.
    x: f64,
    z: f64,
    /// Calf contribution `ρ·cos(φ₁+φ₂)` and `ρ·sin(φ₁+φ₂)`.
    a: f64,
    b: f64,
    lat: f64,
}

impl ChainTerms {
    fn new(geom: &LegGeometry, phi: &Vector3<f64>, rho: f64) -> Self {
        let (s0, c0) = phi[0].sin_cos();
        let (s1, c1) = phi[1].sin_cos();
        let (s12, c12) = (phi[1] + phi[2]).sin_cos();
        let a = rho * c12;
        let b = rho * s12;
        let lt = geom.thigh_length;
        ChainTerms {
            s0,
            c0,
            s12,
            c12,
            x: -lt * s1 - b,
            z: -lt * c1 - a,
            a,
            b,
            lat: geom.lateral(),
        }
    }

    fn jacobian(&self) -> Matrix3<f64> {
        let ChainTerms {
            s0, c0, x, z, a, b, lat, ..
        } = *self;
        Matrix3::new(
            0.0,
            z,
            -a,
            -s0 * lat - c0 * z,
            s0 * x,
            -s0 * b,
            c0 * lat - s0 * z,
            -c0 * x,
            c0 * b,
        )
    }
}

/// Foot position in the body frame.
pub fn forward_kinematics(geom: &LegGeometry, phi: &Vector3<f64>, rho: &KinParams) -> Vector3<f64> {
    let t = ChainTerms::new(geom, phi, rho.calf_length);
    geom.hip() + Vector3::new(t.x, t.c0 * t.lat - t.s0 * t.z, t.s0 * t.lat + t.c0 * t.z)
}

/// `∂g/∂φ`.
pub fn leg_jacobian(geom: &LegGeometry, phi: &Vector3<f64>, rho: &KinParams) -> Matrix3<f64> {
    ChainTerms::new(geom, phi, rho.calf_length).jacobian()
}

/// Parameter and second-order derivatives of the leg model.
///
/// `vec(J)` stacks the columns of `J`, so `(φ̇ᵀ ⊗ I₃)·∂vec(J)/∂x` is the
/// derivative of `J φ̇` with respect to `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicPartials {
    pub dg_drho: Vector3<f64>,
    pub dvecj_dphi: SMatrix<f64, 9, 3>,
    pub dvecj_drho: SVector<f64, 9>,
}

impl KinematicPartials {
    /// `(φ̇ᵀ ⊗ I₃) · ∂vec(J)/∂φ`.
    pub fn djdphi_times_rate(&self, dphi: &Vector3<f64>) -> Matrix3<f64> {
        kron_rate(dphi) * self.dvecj_dphi
    }

    /// `(φ̇ᵀ ⊗ I₃) · ∂vec(J)/∂ρ`.
    pub fn djdrho_times_rate(&self, dphi: &Vector3<f64>) -> Vector3<f64> {
        kron_rate(dphi) * self.dvecj_drho
    }
}

/// `φ̇ᵀ ⊗ I₃` as a 3×9 matrix.
pub fn kron_rate(dphi: &Vector3<f64>) -> SMatrix<f64, 3, 9> {
    let mut k = SMatrix::<f64, 3, 9>::zeros();
    for j in 0..3 {
        for i in 0..3 {
            k[(i, 3 * j + i)] = dphi[j];
        }
    }
    k
}

pub fn kinematic_partials(
    geom: &LegGeometry,
    phi: &Vector3<f64>,
    rho: &KinParams,
) -> KinematicPartials {
    let t = ChainTerms::new(geom, phi, rho.calf_length);
    let ChainTerms {
        s0,
        c0,
        s12,
        c12,
        x,
        z,
        a,
        b,
        lat,
    } = t;

    // Partials of the planar coordinates: x_φ1 = z, z_φ1 = -x,
    // x_φ2 = -a, z_φ2 = b, x_ρ = -s12, z_ρ = -c12.
    let dx = [0.0, z, -a];
    let dz = [0.0, -x, b];
    let (xr, zr) = (-s12, -c12);

    let mut dvecj_dphi = SMatrix::<f64, 9, 3>::zeros();
    // Column 0 of J: [0, -s0·lat - c0·z, c0·lat - s0·z]
    let col0 = |k: usize| -> Vector3<f64> {
        if k == 0 {
            Vector3::new(0.0, -c0 * lat + s0 * z, -s0 * lat - c0 * z)
        } else {
            Vector3::new(0.0, -c0 * dz[k], -s0 * dz[k])
        }
    };
    // Column 1 of J: [z, s0·x, -c0·x]
    let col1 = |k: usize| -> Vector3<f64> {
        if k == 0 {
            Vector3::new(0.0, c0 * x, s0 * x)
        } else {
            Vector3::new(dz[k], s0 * dx[k], -c0 * dx[k])
        }
    };
    // Column 2 of J: [-a, -s0·b, c0·b], with a' = -b and b' = a for φ1, φ2.
    let col2 = |k: usize| -> Vector3<f64> {
        if k == 0 {
            Vector3::new(0.0, -c0 * b, -s0 * b)
        } else {
            Vector3::new(b, -s0 * a, c0 * a)
        }
    };
    for k in 0..3 {
        dvecj_dphi.fixed_view_mut::<3, 1>(0, k).copy_from(&col0(k));
        dvecj_dphi.fixed_view_mut::<3, 1>(3, k).copy_from(&col1(k));
        dvecj_dphi.fixed_view_mut::<3, 1>(6, k).copy_from(&col2(k));
    }

    let mut dvecj_drho = SVector::<f64, 9>::zeros();
    dvecj_drho
        .fixed_rows_mut::<3>(0)
        .copy_from(&Vector3::new(0.0, -c0 * zr, -s0 * zr));
    dvecj_drho
        .fixed_rows_mut::<3>(3)
        .copy_from(&Vector3::new(zr, s0 * xr, -c0 * xr));
    dvecj_drho
        .fixed_rows_mut::<3>(6)
        .copy_from(&Vector3::new(-c12, -s0 * s12, c0 * s12));

    KinematicPartials {
        dg_drho: Vector3::new(xr, -s0 * zr, c0 * zr),
        dvecj_dphi,
        dvecj_drho,
    }
}

/// Body velocity in the body frame implied by a non-slipping foot:
/// `v = -(J φ̇ + ω × g)`.
pub fn lo_velocity_body(
    geom: &LegGeometry,
    phi: &Vector3<f64>,
    dphi: &Vector3<f64>,
    rho: &KinParams,
    omega_corrected: &Vector3<f64>,
) -> Vector3<f64> {
    let foot = forward_kinematics(geom, phi, rho);
    let jac = leg_jacobian(geom, phi, rho);
    -(jac * dphi + omega_corrected.cross(&foot))
}

/// World-frame body velocity `-A(q)[J φ̇ + ω × g]`.
pub fn lo_velocity_world(
    q: &UnitQuaternion,
    geom: &LegGeometry,
    phi: &Vector3<f64>,
    dphi: &Vector3<f64>,
    rho: &KinParams,
    omega_corrected: &Vector3<f64>,
) -> Vector3<f64> {
    q.rotate(&lo_velocity_body(geom, phi, dphi, rho, omega_corrected))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::skew;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(side: f64) -> LegGeometry {
        LegGeometry {
            hip_offset: [0.183, side * 0.047, 0.0],
            abduction_offset: 0.085,
            thigh_length: 0.2,
            calf_length_nominal: 0.21,
            side_sign: side,
        }
    }

    /// Homogeneous-transform evaluation of the declared chain.
    fn transform_stack(geom: &LegGeometry, phi: &Vector3<f64>, rho: f64) -> Vector3<f64> {
        fn rot_x(a: f64) -> Matrix4<f64> {
            let (s, c) = a.sin_cos();
            Matrix4::new(
                1.0, 0.0, 0.0, 0.0, 0.0, c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0,
            )
        }
        fn rot_y(a: f64) -> Matrix4<f64> {
            let (s, c) = a.sin_cos();
            Matrix4::new(
                c, 0.0, s, 0.0, 0.0, 1.0, 0.0, 0.0, -s, 0.0, c, 0.0, 0.0, 0.0, 0.0, 1.0,
            )
        }
        fn trans(x: f64, y: f64, z: f64) -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            m[(0, 3)] = x;
            m[(1, 3)] = y;
            m[(2, 3)] = z;
            m
        }
        let h = geom.hip();
        let t = trans(h.x, h.y, h.z)
            * rot_x(phi[0])
            * trans(0.0, geom.lateral(), 0.0)
            * rot_y(phi[1])
            * trans(0.0, 0.0, -geom.thigh_length)
            * rot_y(phi[2])
            * trans(0.0, 0.0, -rho);
        Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
    }

    fn random_phi(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-0.8..0.8),
            rng.random_range(-1.5..1.5),
            rng.random_range(-2.6..-0.2),
        )
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(1e-3)
    }

    #[test]
    fn zero_pose_points_down() {
        for side in [1.0, -1.0] {
            let g = geom(side);
            let rho = KinParams::new(0.23);
            let p = forward_kinematics(&g, &Vector3::zeros(), &rho);
            let expected = g.hip() + Vector3::new(0.0, side * 0.085, -(0.2 + 0.23));
            assert!((p - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn horizontal_thigh() {
        let g = geom(-1.0);
        let rho = KinParams::new(0.21);
        let phi = Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        let p = forward_kinematics(&g, &phi, &rho);
        let expected = g.hip() + Vector3::new(-(0.2 + 0.21), -0.085, 0.0);
        assert!((p - expected).norm() < 1e-15);
    }

    #[test]
    fn matches_transform_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000 {
            let g = geom(if i % 2 == 0 { 1.0 } else { -1.0 });
            let phi = random_phi(&mut rng);
            let rho = rng.random_range(0.1..0.4);
            let a = forward_kinematics(&g, &phi, &KinParams::new(rho));
            let b = transform_stack(&g, &phi, rho);
            assert!((a - b).norm() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn abduction_column_is_revolute_about_x() {
        let g = geom(1.0);
        let rho = KinParams::new(0.23);
        let j = leg_jacobian(&g, &Vector3::zeros(), &rho);
        let foot = forward_kinematics(&g, &Vector3::zeros(), &rho);
        let col = skew(&Vector3::x()) * (foot - g.hip());
        assert!((j.column(0) - col).norm() < 1e-15);
        assert_eq!(j * Vector3::zeros(), Vector3::zeros());
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for i in 0..1000 {
            let g = geom(if i % 2 == 0 { 1.0 } else { -1.0 });
            let phi = random_phi(&mut rng);
            let rho = KinParams::new(rng.random_range(0.1..0.4));
            let j = leg_jacobian(&g, &phi, &rho);
            let scale = j.norm();
            for k in 0..3 {
                let mut pp = phi;
                pp[k] += h;
                let mut pm = phi;
                pm[k] -= h;
                let fd = (forward_kinematics(&g, &pp, &rho) - forward_kinematics(&g, &pm, &rho))
                    / (2.0 * h);
                for r in 0..3 {
                    assert!(rel_err(fd[r], j[(r, k)], scale) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn partials_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for i in 0..1000 {
            let g = geom(if i % 2 == 0 { 1.0 } else { -1.0 });
            let phi = random_phi(&mut rng);
            let rho_v = rng.random_range(0.1..0.4);
            let rho = KinParams::new(rho_v);
            let p = kinematic_partials(&g, &phi, &rho);

            let fd_g = (forward_kinematics(&g, &phi, &KinParams::new(rho_v + h))
                - forward_kinematics(&g, &phi, &KinParams::new(rho_v - h)))
                / (2.0 * h);
            for r in 0..3 {
                assert!(rel_err(fd_g[r], p.dg_drho[r], 1.0) < 1e-5);
            }

            let vec_j = |phi: &Vector3<f64>, rho: f64| -> SVector<f64, 9> {
                let j = leg_jacobian(&g, phi, &KinParams::new(rho));
                SVector::<f64, 9>::from_column_slice(j.as_slice())
            };
            let scale = p.dvecj_dphi.norm();
            for k in 0..3 {
                let mut pp = phi;
                pp[k] += h;
                let mut pm = phi;
                pm[k] -= h;
                let fd = (vec_j(&pp, rho_v) - vec_j(&pm, rho_v)) / (2.0 * h);
                for r in 0..9 {
                    assert!(rel_err(fd[r], p.dvecj_dphi[(r, k)], scale) < 1e-5);
                }
            }
            let fd = (vec_j(&phi, rho_v + h) - vec_j(&phi, rho_v - h)) / (2.0 * h);
            for r in 0..9 {
                assert!(rel_err(fd[r], p.dvecj_drho[r], 1.0) < 1e-5);
            }
        }
    }

    #[test]
    fn calf_derivative_at_zero_pose_points_down() {
        let p = kinematic_partials(&geom(1.0), &Vector3::zeros(), &KinParams::new(0.2));
        assert!((p.dg_drho - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn jacobian_is_affine_in_calf_length() {
        // J(φ, ρ) = J(φ, 0) + ρ·∂J/∂ρ holds exactly for this chain, so the
        // parameter derivative equals the difference of two evaluations.
        let g = geom(-1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut phi = random_phi(&mut rng);
            phi[2] = 0.0;
            let p = kinematic_partials(&g, &phi, &KinParams::new(0.21));
            let j1 = leg_jacobian(&g, &phi, &KinParams::new(1.0));
            let j0 = leg_jacobian(&g, &phi, &KinParams::new(0.0));
            let diff = j1 - j0;
            let d = SVector::<f64, 9>::from_column_slice(diff.as_slice());
            assert!((d - p.dvecj_drho).norm() < 1e-14);
            // The knee column derivative is the abduction-rotated y × dg/dρ.
            let calf_col = Vector3::new(d[6], d[7], d[8]);
            let knee_axis = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), phi[0])
                * Vector3::y();
            assert!((knee_axis.cross(&p.dg_drho) - calf_col).norm() < 1e-14);
        }
    }

    #[test]
    fn continuity_in_calf_length() {
        let g = geom(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let phi = random_phi(&mut rng);
            let rho = KinParams::new(0.22);
            let d = 1e-3;
            let p = kinematic_partials(&g, &phi, &rho);
            let diff = forward_kinematics(&g, &phi, &KinParams::new(0.22 + d))
                - forward_kinematics(&g, &phi, &rho);
            assert!(diff.norm() <= p.dg_drho.norm() * d + 1e-9);
        }
    }

    #[test]
    fn kronecker_identity() {
        let g = geom(1.0);
        let phi = Vector3::new(0.1, 0.7, -1.4);
        let dphi = Vector3::new(0.3, -1.2, 2.0);
        let rho = KinParams::new(0.23);
        let p = kinematic_partials(&g, &phi, &rho);
        let h = 1e-6;
        let analytic = p.djdphi_times_rate(&dphi);
        for k in 0..3 {
            let mut pp = phi;
            pp[k] += h;
            let mut pm = phi;
            pm[k] -= h;
            let fd = (leg_jacobian(&g, &pp, &rho) * dphi - leg_jacobian(&g, &pm, &rho) * dphi)
                / (2.0 * h);
            assert!((fd - analytic.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn lo_velocity_cases() {
        let g = geom(1.0);
        let phi = Vector3::new(0.05, 0.8, -1.5);
        let rho = KinParams::new(0.23);
        let zero = Vector3::zeros();
        assert_eq!(lo_velocity_body(&g, &phi, &zero, &rho, &zero), zero);
        let dphi = Vector3::new(0.2, 1.0, -0.4);
        let v = lo_velocity_body(&g, &phi, &dphi, &rho, &zero);
        assert!((v + leg_jacobian(&g, &phi, &rho) * dphi).norm() < 1e-15);

        let omega = Vector3::new(0.1, -0.2, 0.3);
        let vb = lo_velocity_body(&g, &phi, &dphi, &rho, &omega);
        let vw = lo_velocity_world(&UnitQuaternion::identity(), &g, &phi, &dphi, &rho, &omega);
        assert_eq!(vb, vw);

        let q = UnitQuaternion::new(0.7, Vector3::new(0.1, -0.3, 0.5));
        let vw = lo_velocity_world(&q, &g, &phi, &dphi, &rho, &omega);
        let a = q.rotation_matrix();
        assert!((a.transpose() * vw - vb).norm() < 1e-14);
        let foot = forward_kinematics(&g, &phi, &rho);
        let jac = leg_jacobian(&g, &phi, &rho);
        let no_slip = vw + a * (jac * dphi) + a * omega.cross(&foot);
        assert!(no_slip.norm() < 1e-14);
    }
}
