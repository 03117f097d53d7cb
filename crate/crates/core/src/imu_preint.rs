//! IMU preintegration between consecutive keyframes.
//!
//! Samples are integrated pairwise with the midpoint rule: the rotation
//! increment uses the mean bias-corrected rate, and position/velocity use the
//! mean of the two rotated specific forces. The 15-dimensional error state is
//! ordered `[δα, δβ, δθ, δb_a, δb_ω]`; `δθ` is a right-perturbation rotation
//! vector on `γ`. Covariance and error Jacobian are propagated as
//! `P ← F P Fᵀ + G Q Gᵀ`, `J ← F J` with `P₀ = 0`, `J₀ = I`.
//!
//! Noise densities are continuous-time. Each step uses the discrete noise
//! covariance `σ²/δt` for every channel, with the `δt` factors carried by `G`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{cayley, inv_cayley, inv_cayley_jacobian, skew, UnitQuaternion};
use crate::state::RobotState;

pub const ALPHA: usize = 0;
pub const BETA: usize = 3;
pub const THETA: usize = 6;
pub const BIAS_A: usize = 9;
pub const BIAS_W: usize = 12;

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Vec15 = SVector<f64, 15>;
pub type Mat15x12 = SMatrix<f64, 15, 12>;

/// Re-integrate instead of applying the first-order correction beyond these.
pub const REINTEGRATE_BW: f64 = 0.01;
pub const REINTEGRATE_BA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.accel.iter().all(|x| x.is_finite())
            && self.gyro.iter().all(|x| x.is_finite())
    }
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub sigma_w: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub sigma_bw: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            sigma_a: 4e-3,
            sigma_w: 4e-4,
            sigma_ba: 4e-4,
            sigma_bw: 2e-5,
        }
    }
}

impl ImuNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_a, self.sigma_w, self.sigma_ba, self.sigma_bw];
        if all.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("IMU noise densities must be positive: {self:?}")))
        }
    }

    /// Discrete per-step covariance diagonal for `[n_a, n_ω, n_ba, n_bω]`.
    pub(crate) fn discrete_diag(&self, dt: f64) -> [f64; 4] {
        [
            self.sigma_a * self.sigma_a / dt,
            self.sigma_w * self.sigma_w / dt,
            self.sigma_ba * self.sigma_ba / dt,
            self.sigma_bw * self.sigma_bw / dt,
        ]
    }
}

/// Linearized quantities of one integration step, shared with the leg
/// preintegrations that ride on the same IMU stream.
#[derive(Debug, Clone)]
pub struct ImuStep {
    pub dt: f64,
    /// `A(γ)` before and after the step.
    pub rot_start: Matrix3<f64>,
    pub rot_end: Matrix3<f64>,
    /// Transpose of the step's rotation increment.
    pub inc_transpose: Matrix3<f64>,
    /// Maps a gyro-rate perturbation to the end-of-step rotation error,
    /// scaled by `-δt`.
    pub rate_to_theta: Matrix3<f64>,
    pub f: Mat15,
    pub g: Mat15x12,
    pub q_diag: [f64; 4],
}

/// Bias-corrected preintegration terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedImu {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuPreintegration {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion,
    pub dt_total: f64,
    pub lin_ba: Vector3<f64>,
    pub lin_bw: Vector3<f64>,
    pub cov: Mat15,
    pub jacobian: Mat15,
    /// All samples, first one included, for re-integration.
    samples: Vec<ImuSample>,
}

impl ImuPreintegration {
    pub fn new(first: ImuSample, lin_ba: Vector3<f64>, lin_bw: Vector3<f64>) -> Self {
        ImuPreintegration {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            dt_total: 0.0,
            lin_ba,
            lin_bw,
            cov: Mat15::zeros(),
            jacobian: Mat15::identity(),
            samples: vec![first],
        }
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn last_sample(&self) -> &ImuSample {
        self.samples.last().expect("preintegration always holds its first sample")
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.last_sample().t
    }

    /// Integrates the interval from the last sample to `s`.
    pub fn integrate_sample(
        &mut self,
        s: &ImuSample,
        dt: f64,
        noise: &ImuNoise,
    ) -> Result<ImuStep> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveDt(dt));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite { what: "IMU", t: s.t });
        }
        let prev = *self.last_sample();
        let step = self.propagate(&prev, s, dt, noise);
        self.samples.push(*s);
        Ok(step)
    }

    fn propagate(
        &mut self,
        s0: &ImuSample,
        s1: &ImuSample,
        dt: f64,
        noise: &ImuNoise,
    ) -> ImuStep {
        let w_mean = 0.5 * (s0.gyro + s1.gyro) - self.lin_bw;
        let half = 0.5 * dt * w_mean;
        let inc = cayley(&half);
        let rot0 = self.gamma.rotation_matrix();
        let gamma1 = self.gamma.product(&inc);
        let rot1 = gamma1.rotation_matrix();
        let a0 = s0.accel - self.lin_ba;
        let a1 = s1.accel - self.lin_ba;
        let f_mean = 0.5 * (rot0 * a0 + rot1 * a1);

        self.alpha += self.beta * dt + 0.5 * f_mean * dt * dt;
        self.beta += f_mean * dt;
        self.gamma = gamma1;
        self.dt_total += dt;

        // Linearization. δθ₁ = Rincᵀ δθ₀ + M (δb_ω + n_ω), with M the scaled
        // right Jacobian of the Cayley increment.
        let inc_t = inc.rotation_matrix().transpose();
        let m = -(Matrix3::identity() - skew(&half)) * (dt / (1.0 + half.norm_squared()));
        let a0x = skew(&a0);
        let a1x = skew(&a1);
        let i3 = Matrix3::identity();

        // δf̄ coefficients.
        let df_dtheta = -0.5 * rot0 * a0x - 0.5 * rot1 * a1x * inc_t;
        let df_dba = -0.5 * (rot0 + rot1);
        let df_dbw = -0.5 * rot1 * a1x * m;

        let mut f = Mat15::identity();
        f.fixed_view_mut::<3, 3>(ALPHA, BETA).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(ALPHA, THETA)
            .copy_from(&(df_dtheta * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(ALPHA, BIAS_A)
            .copy_from(&(df_dba * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(ALPHA, BIAS_W)
            .copy_from(&(df_dbw * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(BETA, THETA).copy_from(&(df_dtheta * dt));
        f.fixed_view_mut::<3, 3>(BETA, BIAS_A).copy_from(&(df_dba * dt));
        f.fixed_view_mut::<3, 3>(BETA, BIAS_W).copy_from(&(df_dbw * dt));
        f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&inc_t);
        f.fixed_view_mut::<3, 3>(THETA, BIAS_W).copy_from(&m);

        // Noise enters like the bias errors, plus the random walks.
        let mut g = Mat15x12::zeros();
        g.fixed_view_mut::<3, 3>(ALPHA, 0)
            .copy_from(&(df_dba * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(ALPHA, 3)
            .copy_from(&(df_dbw * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(BETA, 0).copy_from(&(df_dba * dt));
        g.fixed_view_mut::<3, 3>(BETA, 3).copy_from(&(df_dbw * dt));
        g.fixed_view_mut::<3, 3>(THETA, 3).copy_from(&m);
        g.fixed_view_mut::<3, 3>(BIAS_A, 6).copy_from(&(i3 * dt));
        g.fixed_view_mut::<3, 3>(BIAS_W, 9).copy_from(&(i3 * dt));

        let q_diag = noise.discrete_diag(dt);
        let mut gq = g;
        for (blk, q) in q_diag.iter().enumerate() {
            for c in 0..3 {
                gq.column_mut(3 * blk + c).scale_mut(*q);
            }
        }
        let cov = f * self.cov * f.transpose() + gq * g.transpose();
        self.cov = 0.5 * (cov + cov.transpose());
        self.jacobian = f * self.jacobian;

        ImuStep {
            dt,
            rot_start: rot0,
            rot_end: rot1,
            inc_transpose: inc_t,
            rate_to_theta: m,
            f,
            g,
            q_diag,
        }
    }

    /// Fresh integration of the buffered samples around new bias
    /// linearization points.
    pub fn reintegrated(
        &self,
        lin_ba: Vector3<f64>,
        lin_bw: Vector3<f64>,
        noise: &ImuNoise,
    ) -> Result<ImuPreintegration> {
        let mut out = ImuPreintegration::new(self.samples[0], lin_ba, lin_bw);
        for w in self.samples.windows(2) {
            out.integrate_sample(&w[1], w[1].t - w[0].t, noise)?;
        }
        Ok(out)
    }

    /// Re-integration that also reports every step, for leg preintegrations
    /// that need to be rebuilt in lock-step.
    pub(crate) fn reintegrated_with_steps(
        &self,
        lin_ba: Vector3<f64>,
        lin_bw: Vector3<f64>,
        noise: &ImuNoise,
    ) -> Result<(ImuPreintegration, Vec<ImuStep>)> {
        let mut out = ImuPreintegration::new(self.samples[0], lin_ba, lin_bw);
        let mut steps = Vec::with_capacity(self.samples.len());
        for w in self.samples.windows(2) {
            steps.push(out.integrate_sample(&w[1], w[1].t - w[0].t, noise)?);
        }
        Ok((out, steps))
    }

    pub fn needs_reintegration(&self, ba: &Vector3<f64>, bw: &Vector3<f64>) -> bool {
        (ba - self.lin_ba).norm() > REINTEGRATE_BA || (bw - self.lin_bw).norm() > REINTEGRATE_BW
    }

    /// First-order update of `α, β, γ` for bias deltas relative to the
    /// linearization points.
    pub fn apply_bias_correction(
        &self,
        delta_ba: &Vector3<f64>,
        delta_bw: &Vector3<f64>,
    ) -> Result<CorrectedImu> {
        let nw = delta_bw.norm();
        if nw > REINTEGRATE_BW {
            return Err(Error::ReintegrationRequired {
                what: "gyro bias delta",
                norm: nw,
                limit: REINTEGRATE_BW,
            });
        }
        let na = delta_ba.norm();
        if na > REINTEGRATE_BA {
            return Err(Error::ReintegrationRequired {
                what: "accel bias delta",
                norm: na,
                limit: REINTEGRATE_BA,
            });
        }
        Ok(self.corrected(delta_ba, delta_bw))
    }

    pub(crate) fn corrected(&self, delta_ba: &Vector3<f64>, delta_bw: &Vector3<f64>) -> CorrectedImu {
        let j = &self.jacobian;
        let alpha = self.alpha
            + j.fixed_view::<3, 3>(ALPHA, BIAS_A) * delta_ba
            + j.fixed_view::<3, 3>(ALPHA, BIAS_W) * delta_bw;
        let beta = self.beta
            + j.fixed_view::<3, 3>(BETA, BIAS_A) * delta_ba
            + j.fixed_view::<3, 3>(BETA, BIAS_W) * delta_bw;
        let dtheta = j.fixed_view::<3, 3>(THETA, BIAS_W) * delta_bw;
        CorrectedImu {
            alpha,
            beta,
            gamma: self.gamma.product(&cayley(&(0.5 * dtheta))),
        }
    }

    /// 15-dimensional residual between two keyframe states.
    pub fn residual(
        &self,
        xk: &RobotState,
        xk1: &RobotState,
        gravity_w: &Vector3<f64>,
    ) -> Result<Vec15> {
        Ok(self.residual_and_jacobians(xk, xk1, gravity_w, false)?.0)
    }

    /// Residual and, optionally, its Jacobian with respect to the error
    /// states `[δp, δθ, δv, δb_a, δb_ω]` of both keyframes (15×30).
    pub fn residual_and_jacobians(
        &self,
        xk: &RobotState,
        xk1: &RobotState,
        gravity_w: &Vector3<f64>,
        with_jacobian: bool,
    ) -> Result<(Vec15, Option<SMatrix<f64, 15, 30>>)> {
        let dba = xk.ba - self.lin_ba;
        let dbw = xk.bw - self.lin_bw;
        let c = self.corrected(&dba, &dbw);
        let dt = self.dt_total;
        let rk_t = xk.q.rotation_matrix().transpose();

        let dp_world = xk1.p - xk.p + 0.5 * gravity_w * dt * dt - xk.v * dt;
        let dv_world = xk1.v + gravity_w * dt - xk.v;
        let err_q = xk.q.inverse().product(&xk1.q).product(&c.gamma.inverse());

        let mut r = Vec15::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&(rk_t * dp_world - c.alpha));
        r.fixed_rows_mut::<3>(3)
            .copy_from(&(2.0 * inv_cayley(&err_q)?));
        r.fixed_rows_mut::<3>(6).copy_from(&(rk_t * dv_world - c.beta));
        r.fixed_rows_mut::<3>(9).copy_from(&(xk1.ba - xk.ba));
        r.fixed_rows_mut::<3>(12).copy_from(&(xk1.bw - xk.bw));
        if !with_jacobian {
            return Ok((r, None));
        }

        // Column offsets in the 30-dim stacked error state.
        const P0: usize = 0;
        const T0: usize = 3;
        const V0: usize = 6;
        const BA0: usize = 9;
        const BW0: usize = 12;
        const P1: usize = 15;
        const T1: usize = 18;
        const V1: usize = 21;
        const BA1: usize = 24;
        const BW1: usize = 27;
        let i3 = Matrix3::identity();
        let j = &self.jacobian;
        let mut jac = SMatrix::<f64, 15, 30>::zeros();

        // Position rows.
        jac.fixed_view_mut::<3, 3>(0, P0).copy_from(&(-rk_t));
        jac.fixed_view_mut::<3, 3>(0, T0)
            .copy_from(&skew(&(rk_t * dp_world)));
        jac.fixed_view_mut::<3, 3>(0, V0).copy_from(&(-rk_t * dt));
        jac.fixed_view_mut::<3, 3>(0, BA0)
            .copy_from(&(-j.fixed_view::<3, 3>(ALPHA, BIAS_A)));
        jac.fixed_view_mut::<3, 3>(0, BW0)
            .copy_from(&(-j.fixed_view::<3, 3>(ALPHA, BIAS_W)));
        jac.fixed_view_mut::<3, 3>(0, P1).copy_from(&rk_t);

        // Orientation rows: r = 2 Φ⁻¹(e), e = q_k⁻¹ ⊗ q_k1 ⊗ γ_c⁻¹.
        let e4 = err_q.as_vector4();
        let dr_de = 2.0 * inv_cayley_jacobian(&e4);
        let b_half = 0.5 * crate::so3::embed_matrix();
        let qk_inv_qk1 = xk.q.inverse().product(&xk1.q);
        // q_k ← q_k ⊗ δq: e = δq⁻¹ ⊗ (q_k⁻¹ q_k1 γ_c⁻¹) = R(err) δq⁻¹
        let de_dt0 = -err_q.right_matrix() * b_half;
        // q_k1 ← q_k1 ⊗ δq: e = L(q_k⁻¹ q_k1) R(γ_c⁻¹) δq
        let de_dt1 = qk_inv_qk1.left_matrix() * c.gamma.inverse().right_matrix() * b_half;
        jac.fixed_view_mut::<3, 3>(3, T0).copy_from(&(dr_de * de_dt0));
        jac.fixed_view_mut::<3, 3>(3, T1).copy_from(&(dr_de * de_dt1));
        // γ_c⁻¹ = Φ(u)⁻¹ ⊗ γ̂⁻¹ with u = ½ J^γ_ω δb_ω.
        let j_gw = j.fixed_view::<3, 3>(THETA, BIAS_W).into_owned();
        let u = 0.5 * j_gw * dbw;
        let mut dcinv_du = crate::so3::cayley_jacobian(&u);
        for col in 0..3 {
            for row in 1..4 {
                dcinv_du[(row, col)] = -dcinv_du[(row, col)];
            }
        }
        let de_dbw = qk_inv_qk1.left_matrix()
            * self.gamma.inverse().right_matrix()
            * dcinv_du
            * (0.5 * j_gw);
        jac.fixed_view_mut::<3, 3>(3, BW0).copy_from(&(dr_de * de_dbw));

        // Velocity rows.
        jac.fixed_view_mut::<3, 3>(6, T0)
            .copy_from(&skew(&(rk_t * dv_world)));
        jac.fixed_view_mut::<3, 3>(6, V0).copy_from(&(-rk_t));
        jac.fixed_view_mut::<3, 3>(6, BA0)
            .copy_from(&(-j.fixed_view::<3, 3>(BETA, BIAS_A)));
        jac.fixed_view_mut::<3, 3>(6, BW0)
            .copy_from(&(-j.fixed_view::<3, 3>(BETA, BIAS_W)));
        jac.fixed_view_mut::<3, 3>(6, V1).copy_from(&rk_t);

        // Bias rows.
        jac.fixed_view_mut::<3, 3>(9, BA0).copy_from(&(-i3));
        jac.fixed_view_mut::<3, 3>(9, BA1).copy_from(&i3);
        jac.fixed_view_mut::<3, 3>(12, BW0).copy_from(&(-i3));
        jac.fixed_view_mut::<3, 3>(12, BW1).copy_from(&i3);

        Ok((r, Some(jac)))
    }
}

/// Free-function form of [`ImuPreintegration::integrate_sample`].
pub fn integrate_sample(
    pre: &mut ImuPreintegration,
    s: &ImuSample,
    dt: f64,
    noise: &ImuNoise,
) -> Result<ImuStep> {
    pre.integrate_sample(s, dt, noise)
}

pub fn imu_residual(
    pre: &ImuPreintegration,
    xk: &RobotState,
    xk1: &RobotState,
    gravity_w: &Vector3<f64>,
) -> Result<Vec15> {
    pre.residual(xk, xk1, gravity_w)
}

pub fn apply_bias_correction(
    pre: &ImuPreintegration,
    delta_ba: &Vector3<f64>,
    delta_bw: &Vector3<f64>,
) -> Result<CorrectedImu> {
    pre.apply_bias_correction(delta_ba, delta_bw)
}
