//! Quaternion and small-rotation algebra.
//!
//! Quaternions are stored scalar-first, `[q_w; q_x; q_y; q_z]`, and follow the
//! Hamilton product convention. `A(q)` maps body-frame vectors into the
//! reference frame. Small rotations are parameterized with Rodrigues
//! parameters and mapped onto the unit sphere by the Cayley map
//! `Φ(θ) = [1; θ] / sqrt(1 + |θ|²)`.
//!
//! Error states in the estimator use the convention
//! `q = q̂ ⊗ Φ(δθ / 2)`, so that `δθ` is a rotation vector to first order.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-product matrix: `skew(v) * x == v × x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Embeds R³ into the pure quaternions.
pub fn embed_matrix() -> Matrix4x3<f64> {
    let mut b = Matrix4x3::zeros();
    b[(1, 0)] = 1.0;
    b[(2, 1)] = 1.0;
    b[(3, 2)] = 1.0;
    b
}

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    v: Vector3<f64>,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "UnitQuaternion[{:.9}, {:.9}, {:.9}, {:.9}]",
            self.w, self.v.x, self.v.y, self.v.z
        )
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        [q.w, q.v.x, q.v.y, q.v.z]
    }
}

impl From<[f64; 4]> for UnitQuaternion {
    fn from(a: [f64; 4]) -> Self {
        UnitQuaternion::new(a[0], Vector3::new(a[1], a[2], a[3]))
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion {
            w: 1.0,
            v: Vector3::zeros(),
        }
    }

    /// Builds a quaternion from its parts and normalizes it.
    ///
    /// Panics on a zero-norm input.
    pub fn new(w: f64, v: Vector3<f64>) -> Self {
        let n = (w * w + v.norm_squared()).sqrt();
        assert!(n > 0.0 && n.is_finite(), "cannot normalize quaternion of norm {n}");
        UnitQuaternion { w: w / n, v: v / n }
    }

    pub fn from_vector4(q: &Vector4<f64>) -> Self {
        Self::new(q[0], Vector3::new(q[1], q[2], q[3]))
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let half = 0.5 * angle;
        Self::new(half.cos(), axis * (half.sin() / n))
    }

    /// Exact exponential of a rotation vector.
    pub fn from_rotation_vector(phi: &Vector3<f64>) -> Self {
        Self::from_axis_angle(phi, phi.norm())
    }

    /// Rotation that applies `yaw` about z then `pitch` about the rotated y
    /// and `roll` about the rotated x.
    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw)
            * Self::from_axis_angle(&Vector3::y(), pitch)
            * Self::from_axis_angle(&Vector3::x(), roll)
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn vec(&self) -> Vector3<f64> {
        self.v
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.v.x, self.v.y, self.v.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    /// `q⁻¹ = [q_w; -q_v]`.
    pub fn inverse(&self) -> Self {
        UnitQuaternion {
            w: self.w,
            v: -self.v,
        }
    }

    /// Same rotation, opposite sign.
    pub fn negated(&self) -> Self {
        UnitQuaternion {
            w: -self.w,
            v: -self.v,
        }
    }

    /// Left-multiplication matrix: `q ⊗ p = L(q) p`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        quat_matrix(self.w, &self.v, 1.0)
    }

    /// Right-multiplication matrix: `p ⊗ q = R(q) p`.
    pub fn right_matrix(&self) -> Matrix4<f64> {
        quat_matrix(self.w, &self.v, -1.0)
    }

    /// `A(q) = Bᵀ L(q) R(q)ᵀ B`.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let b = embed_matrix();
        b.transpose() * self.left_matrix() * self.right_matrix().transpose() * b
    }

    pub fn rotate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        // v' = x + 2w (v × x) + 2 v × (v × x)
        let t = 2.0 * self.v.cross(x);
        x + self.w * t + self.v.cross(&t)
    }

    pub fn inverse_rotate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.inverse().rotate(x)
    }

    /// Hamilton product followed by renormalization.
    pub fn product(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let w = self.w * rhs.w - self.v.dot(&rhs.v);
        let v = self.w * rhs.v + rhs.w * self.v + self.v.cross(&rhs.v);
        UnitQuaternion::new(w, v)
    }

    /// Right-perturbation by a rotation vector: `q ⊗ Φ(δθ / 2)`.
    pub fn boxplus(&self, dtheta: &Vector3<f64>) -> UnitQuaternion {
        self.product(&cayley(&(0.5 * dtheta)))
    }

    /// Inverse of [`boxplus`](Self::boxplus): `2 Φ⁻¹(self⁻¹ ⊗ other)`.
    pub fn boxminus(&self, other: &UnitQuaternion) -> Result<Vector3<f64>> {
        Ok(2.0 * inv_cayley(&self.inverse().product(other))?)
    }

    /// Sign-canonical form with `w >= 0`.
    pub fn canonical(&self) -> UnitQuaternion {
        if self.w < 0.0 {
            self.negated()
        } else {
            *self
        }
    }

    /// Yaw of the body x-axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let x = self.rotate(&Vector3::x());
        x.y.atan2(x.x)
    }

    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        let d = self.inverse().product(other);
        2.0 * d.v.norm().atan2(d.w.abs())
    }
}

fn quat_matrix(w: f64, v: &Vector3<f64>, sign: f64) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    for i in 0..3 {
        m[(0, i + 1)] = -v[i];
        m[(i + 1, 0)] = v[i];
    }
    let block = Matrix3::identity() * w + skew(v) * sign;
    m.fixed_view_mut::<3, 3>(1, 1).copy_from(&block);
    m
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        self.product(&rhs)
    }
}

impl Mul<&UnitQuaternion> for &UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: &UnitQuaternion) -> UnitQuaternion {
        self.product(rhs)
    }
}

/// `q1 ⊗ q2`, renormalized.
pub fn quat_product(q1: &UnitQuaternion, q2: &UnitQuaternion) -> UnitQuaternion {
    q1.product(q2)
}

pub fn rotmat_from_quat(q: &UnitQuaternion) -> Matrix3<f64> {
    q.rotation_matrix()
}

/// Cayley map from Rodrigues parameters to a unit quaternion.
pub fn cayley(theta: &Vector3<f64>) -> UnitQuaternion {
    let s = 1.0 / (1.0 + theta.norm_squared()).sqrt();
    UnitQuaternion {
        w: s,
        v: theta * s,
    }
}

/// Inverse Cayley map `q_v / q_w`.
pub fn inv_cayley(q: &UnitQuaternion) -> Result<Vector3<f64>> {
    if q.w == 0.0 || !q.w.is_finite() {
        return Err(Error::CayleySingularity { qw: q.w });
    }
    Ok(q.v / q.w)
}

/// Derivative of `Φ⁻¹` with respect to the four quaternion components.
pub(crate) fn inv_cayley_jacobian(q: &Vector4<f64>) -> nalgebra::Matrix3x4<f64> {
    let w = q[0];
    let mut j = nalgebra::Matrix3x4::zeros();
    for i in 0..3 {
        j[(i, 0)] = -q[i + 1] / (w * w);
        j[(i, i + 1)] = 1.0 / w;
    }
    j
}

/// Derivative of `Φ(u)` with respect to `u` (4×3).
pub(crate) fn cayley_jacobian(u: &Vector3<f64>) -> Matrix4x3<f64> {
    let s2 = 1.0 + u.norm_squared();
    let s = s2.sqrt();
    let s3 = s2 * s;
    let mut j = Matrix4x3::zeros();
    for c in 0..3 {
        j[(0, c)] = -u[c] / s3;
    }
    let block = Matrix3::identity() / s - u * u.transpose() / s3;
    j.fixed_view_mut::<3, 3>(1, 0).copy_from(&block);
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_quat(a: f64, b: f64, c: f64, d: f64) -> UnitQuaternion {
        UnitQuaternion::new(a, Vector3::new(b, c, d))
    }

    #[test]
    fn skew_matches_written_form() {
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(s, expected);
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn cayley_examples() {
        let q = cayley(&Vector3::zeros());
        assert_eq!(q, UnitQuaternion::identity());
        let q = cayley(&Vector3::new(1.0, 0.0, 0.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q.w() - h).abs() < 1e-15 && (q.vec().x - h).abs() < 1e-15);
        assert_eq!(q.vec().y, 0.0);
    }

    #[test]
    fn inv_cayley_examples() {
        assert_eq!(inv_cayley(&UnitQuaternion::identity()).unwrap(), Vector3::zeros());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let th = inv_cayley(&UnitQuaternion::new(h, Vector3::new(h, 0.0, 0.0))).unwrap();
        assert!((th - Vector3::x()).norm() < 1e-15);
        let err = inv_cayley(&UnitQuaternion::new(0.0, Vector3::x())).unwrap_err();
        assert!(matches!(err, Error::CayleySingularity { .. }));
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(UnitQuaternion::identity().rotation_matrix(), Matrix3::identity());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = UnitQuaternion::new(h, Vector3::new(h, 0.0, 0.0));
        let y = q.rotation_matrix() * Vector3::y();
        assert!((y - Vector3::z()).norm() < 1e-15);
        assert!((q.rotate(&Vector3::y()) - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn product_with_inverse_is_identity() {
        let q = random_quat(0.3, -0.5, 0.7, 0.1);
        let e = q * q.inverse();
        assert!((e.w() - 1.0).abs() < 1e-15 && e.vec().norm() < 1e-15);
        let p = UnitQuaternion::identity() * q;
        assert!((p.as_vector4() - q.as_vector4()).norm() < 1e-15);
    }

    #[test]
    fn boxminus_inverts_boxplus() {
        let q = random_quat(0.9, 0.1, -0.2, 0.3);
        let d = Vector3::new(0.01, -0.02, 0.03);
        let back = q.boxminus(&q.boxplus(&d)).unwrap();
        assert!((back - d).norm() < 1e-14);
    }

    #[test]
    fn cayley_jacobian_matches_finite_difference() {
        let u = Vector3::new(0.3, -0.2, 0.5);
        let j = cayley_jacobian(&u);
        let h = 1e-6;
        for c in 0..3 {
            let mut up = u;
            up[c] += h;
            let mut um = u;
            um[c] -= h;
            let fd = (cayley(&up).as_vector4() - cayley(&um).as_vector4()) / (2.0 * h);
            assert!((fd - j.column(c)).norm() < 1e-9);
        }
    }

    fn quat_strategy() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-2)
            .prop_map(|(a, b, c, d)| random_quat(a, b, c, d))
    }

    fn vec_strategy(r: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn skew_is_cross_product(v in vec_strategy(10.0), x in vec_strategy(10.0)) {
            let s = skew(&v);
            prop_assert!((s + s.transpose()).norm() == 0.0);
            prop_assert!((s * x - v.cross(&x)).norm() < 1e-12);
            prop_assert!((s * v).norm() < 1e-12);
        }

        #[test]
        fn product_matches_matrix_forms(q1 in quat_strategy(), q2 in quat_strategy()) {
            let p = q1 * q2;
            let via_l = q1.left_matrix() * q2.as_vector4();
            let via_r = q2.right_matrix() * q1.as_vector4();
            prop_assert!((p.as_vector4() - via_l).norm() < 1e-12);
            prop_assert!((p.as_vector4() - via_r).norm() < 1e-12);
            prop_assert!((p.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn product_composes_rotations(q1 in quat_strategy(), q2 in quat_strategy()) {
            let lhs = q1.rotation_matrix() * q2.rotation_matrix();
            let rhs = (q1 * q2).rotation_matrix();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn rotation_is_orthonormal(q in quat_strategy(), x in vec_strategy(5.0)) {
            let a = q.rotation_matrix();
            prop_assert!((a.transpose() * a - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((a.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((a * x - q.rotate(&x)).norm() < 1e-12);
        }

        #[test]
        fn double_cover(q in quat_strategy()) {
            prop_assert!((q.rotation_matrix() - q.negated().rotation_matrix()).norm() < 1e-12);
        }

        #[test]
        fn associativity(q1 in quat_strategy(), q2 in quat_strategy(), q3 in quat_strategy()) {
            let a = (q1 * q2) * q3;
            let b = q1 * (q2 * q3);
            prop_assert!((a.as_vector4() - b.as_vector4()).norm() < 1e-12);
        }

        #[test]
        fn cayley_round_trip(theta in vec_strategy(20.0)) {
            let q = cayley(&theta);
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            let back = inv_cayley(&q).unwrap();
            prop_assert!((back - theta).norm() <= 1e-12 * (1.0 + theta.norm()));
        }

        #[test]
        fn error_convention_round_trip(qhat in quat_strategy(), theta in vec_strategy(0.28)) {
            prop_assume!(theta.norm() < 0.5);
            let q = qhat * cayley(&theta);
            let back = inv_cayley(&(qhat.inverse() * q)).unwrap();
            prop_assert!((back - theta).norm() < 1e-10);
        }
    }
}
