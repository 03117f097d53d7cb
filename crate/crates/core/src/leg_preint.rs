//! Per-leg contact preintegration with the calf length in the state.
//!
//! Each leg accumulates the body displacement it implies,
//! `ε ← ε + ½δt (A(γ₀)v₀ + A(γ₁)v₁)`, where `v` is the leg-odometry body
//! velocity of each sample. The error state extends the IMU one to
//! `[δα, δβ, δθ, δb_a, δb_ω, δε, δρ]` (19 dims) and rides on the IMU steps of
//! the same interval, so every leg carries its own copy of the IMU blocks.
//!
//! Noise vector per step: `[n_a, n_ω, n_ba, n_bω, n_φ, n_φ̇, n_v, n_ρ]`.
//! `σ_φ`, `σ_φ̇` and `σ_v` are per-sample standard deviations; `σ_ρ` is a
//! random-walk density.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_preint::{ImuStep, BIAS_W, THETA};
use crate::kinematics::{
    forward_kinematics, kinematic_partials, leg_jacobian, JointState, KinParams, LegGeometry,
    NUM_LEGS,
};
use crate::so3::skew;
use crate::state::RobotState;

pub const EPS: usize = 15;
pub const RHO: usize = 18;
pub const AUG_DIM: usize = 19;
const NOISE_DIM: usize = 22;
const N_PHI: usize = 12;
const N_DPHI: usize = 15;
const N_V: usize = 18;
const N_RHO: usize = 21;

pub type Mat19 = SMatrix<f64, AUG_DIM, AUG_DIM>;

/// Re-integrate instead of correcting beyond these deltas.
pub const REINTEGRATE_BW: f64 = crate::imu_preint::REINTEGRATE_BW;
pub const REINTEGRATE_RHO: f64 = 0.05;

/// Joint encoder, gyro and contact readings of all legs at one IMU tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegSample {
    pub t: f64,
    pub joints: [JointState; NUM_LEGS],
    pub contact: [bool; NUM_LEGS],
    pub gyro: Vector3<f64>,
}

impl LegSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|x| x.is_finite())
            && self
                .joints
                .iter()
                .all(|j| j.phi.iter().chain(j.dphi.iter()).all(|x| x.is_finite()))
    }

    /// Readings of one leg, with an optional replacement for the contact flag.
    pub fn reading(&self, leg: usize, contact: Option<bool>) -> LegReading {
        LegReading {
            t: self.t,
            joint: self.joints[leg],
            contact: contact.unwrap_or(self.contact[leg]),
            gyro: self.gyro,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegReading {
    pub t: f64,
    pub joint: JointState,
    pub contact: bool,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegNoise {
    pub sigma_phi: f64,
    pub sigma_dphi: f64,
    /// LO-velocity uncertainty in stance (σ₀) and swing (σ₁), m/s.
    pub sigma_v_contact: f64,
    pub sigma_v_nocontact: f64,
    /// Calf-length random-walk density in stance and swing, m/√s.
    pub sigma_rho_contact: f64,
    pub sigma_rho_nocontact: f64,
}

impl Default for LegNoise {
    fn default() -> Self {
        LegNoise {
            sigma_phi: 1e-3,
            sigma_dphi: 1e-2,
            sigma_v_contact: 1e-2,
            sigma_v_nocontact: 1e2,
            sigma_rho_contact: 1e-4,
            sigma_rho_nocontact: 1e-1,
        }
    }
}

impl LegNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_phi,
            self.sigma_dphi,
            self.sigma_v_contact,
            self.sigma_v_nocontact,
            self.sigma_rho_contact,
            self.sigma_rho_nocontact,
        ];
        if !all.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("leg noise values must be positive: {self:?}")));
        }
        if self.sigma_v_contact >= self.sigma_v_nocontact
            || self.sigma_rho_contact >= self.sigma_rho_nocontact
        {
            return Err(Error::Config(
                "leg noise: contact sigmas must be below the no-contact sigmas".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactNoise {
    pub sigma_rho: f64,
    pub sigma_v: f64,
}

pub fn contact_noise(c: bool, noise: &LegNoise) -> ContactNoise {
    let c = if c { 1.0 } else { 0.0 };
    ContactNoise {
        sigma_rho: c * noise.sigma_rho_contact + (1.0 - c) * noise.sigma_rho_nocontact,
        sigma_v: c * noise.sigma_v_contact + (1.0 - c) * noise.sigma_v_nocontact,
    }
}

/// Body-frame leg-odometry velocity and its partials at one sample.
#[derive(Debug, Clone, Copy)]
pub struct LegTerms {
    pub v: Vector3<f64>,
    pub foot: Vector3<f64>,
    pub jac: Matrix3<f64>,
    /// `∂v/∂b_ω = -⟨g⟩`.
    pub dv_dbw: Matrix3<f64>,
    /// `∂v/∂ρ`.
    pub dv_drho: Vector3<f64>,
    /// `∂v/∂φ`.
    pub dv_dphi: Matrix3<f64>,
}

impl LegTerms {
    pub fn new(
        geom: &LegGeometry,
        joint: &JointState,
        rho: &KinParams,
        omega: &Vector3<f64>,
    ) -> LegTerms {
        let phi = joint.angles();
        let dphi = joint.rates();
        let foot = forward_kinematics(geom, &phi, rho);
        let jac = leg_jacobian(geom, &phi, rho);
        let parts = kinematic_partials(geom, &phi, rho);
        let wx = skew(omega);
        LegTerms {
            v: -(jac * dphi + omega.cross(&foot)),
            foot,
            jac,
            dv_dbw: -skew(&foot),
            dv_drho: -(parts.djdrho_times_rate(&dphi) + wx * parts.dg_drho),
            dv_dphi: -(parts.djdphi_times_rate(&dphi) + wx * jac),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LegPreintegration {
    pub leg: usize,
    pub epsilon: Vector3<f64>,
    pub lin_rho: KinParams,
    pub lin_bw: Vector3<f64>,
    pub p_aug: Mat19,
    pub j_aug: Mat19,
    readings: Vec<LegReading>,
    last_terms: LegTerms,
    contacts: usize,
}

impl LegPreintegration {
    pub fn new(
        leg: usize,
        first: LegReading,
        geom: &LegGeometry,
        lin_rho: KinParams,
        lin_bw: Vector3<f64>,
    ) -> Self {
        let last_terms = LegTerms::new(geom, &first.joint, &lin_rho, &(first.gyro - lin_bw));
        LegPreintegration {
            leg,
            epsilon: Vector3::zeros(),
            lin_rho,
            lin_bw,
            p_aug: Mat19::zeros(),
            j_aug: Mat19::identity(),
            readings: vec![first],
            last_terms,
            contacts: first.contact as usize,
        }
    }

    pub fn readings(&self) -> &[LegReading] {
        &self.readings
    }

    /// Fraction of buffered samples flagged in contact.
    pub fn contact_ratio(&self) -> f64 {
        self.contacts as f64 / self.readings.len() as f64
    }

    /// Advances by one IMU step; `step` must come from the IMU
    /// preintegration of the same interval and bias linearization point.
    pub fn integrate_leg_sample(
        &mut self,
        r: &LegReading,
        step: &ImuStep,
        geom: &LegGeometry,
        noise: &LegNoise,
    ) -> Result<()> {
        let dt = step.dt;
        if !(dt > 0.0) {
            return Err(Error::NonPositiveDt(dt));
        }
        let t0 = self.last_terms;
        let t1 = LegTerms::new(geom, &r.joint, &self.lin_rho, &(r.gyro - self.lin_bw));
        let (r0, r1) = (&step.rot_start, &step.rot_end);
        let contact = self.readings.last().is_some_and(|p| p.contact) && r.contact;
        let cn = contact_noise(contact, noise);

        self.epsilon += 0.5 * dt * (r0 * t0.v + r1 * t1.v);

        let h = 0.5 * dt;
        let v1x = skew(&t1.v);
        let mut f = Mat19::identity();
        f.fixed_view_mut::<15, 15>(0, 0).copy_from(&step.f);
        f.fixed_view_mut::<3, 3>(EPS, THETA)
            .copy_from(&(-h * (r0 * skew(&t0.v) + r1 * v1x * step.inc_transpose)));
        let eps_bw = h * (r0 * t0.dv_dbw + r1 * t1.dv_dbw - r1 * v1x * step.rate_to_theta);
        f.fixed_view_mut::<3, 3>(EPS, BIAS_W).copy_from(&eps_bw);
        f.fixed_view_mut::<3, 1>(EPS, RHO)
            .copy_from(&(h * (r0 * t0.dv_drho + r1 * t1.dv_drho)));

        let mut g = SMatrix::<f64, AUG_DIM, NOISE_DIM>::zeros();
        g.fixed_view_mut::<15, 12>(0, 0).copy_from(&step.g);
        g.fixed_view_mut::<3, 3>(EPS, 3).copy_from(&eps_bw);
        g.fixed_view_mut::<3, 3>(EPS, N_PHI)
            .copy_from(&(h * (r0 * t0.dv_dphi + r1 * t1.dv_dphi)));
        g.fixed_view_mut::<3, 3>(EPS, N_DPHI)
            .copy_from(&(h * (r0 * t0.jac + r1 * t1.jac)));
        g.fixed_view_mut::<3, 3>(EPS, N_V)
            .copy_from(&(Matrix3::identity() * dt));
        g[(RHO, N_RHO)] = dt;

        let mut q = SVector::<f64, NOISE_DIM>::zeros();
        for (blk, qd) in step.q_diag.iter().enumerate() {
            q.fixed_rows_mut::<3>(3 * blk).fill(*qd);
        }
        q.fixed_rows_mut::<3>(N_PHI).fill(noise.sigma_phi.powi(2));
        q.fixed_rows_mut::<3>(N_DPHI).fill(noise.sigma_dphi.powi(2));
        q.fixed_rows_mut::<3>(N_V).fill(cn.sigma_v.powi(2));
        q[N_RHO] = cn.sigma_rho.powi(2) / dt;

        let mut gq = g;
        for c in 0..NOISE_DIM {
            gq.column_mut(c).scale_mut(q[c]);
        }
        let p = f * self.p_aug * f.transpose() + gq * g.transpose();
        self.p_aug = 0.5 * (p + p.transpose());
        self.j_aug = f * self.j_aug;

        self.last_terms = t1;
        self.contacts += r.contact as usize;
        self.readings.push(*r);
        Ok(())
    }

    /// Rebuilds from the buffered readings with new linearization points;
    /// `steps` are the matching steps of the re-integrated IMU preintegration.
    pub fn reintegrated(
        &self,
        steps: &[ImuStep],
        geom: &LegGeometry,
        lin_rho: KinParams,
        lin_bw: Vector3<f64>,
        noise: &LegNoise,
    ) -> Result<LegPreintegration> {
        if steps.len() + 1 != self.readings.len() {
            return Err(Error::Config(format!(
                "leg re-integration needs {} IMU steps, got {}",
                self.readings.len() - 1,
                steps.len()
            )));
        }
        let mut out = LegPreintegration::new(self.leg, self.readings[0], geom, lin_rho, lin_bw);
        for (r, s) in self.readings[1..].iter().zip(steps) {
            out.integrate_leg_sample(r, s, geom, noise)?;
        }
        Ok(out)
    }

    pub fn needs_reintegration(&self, bw: &Vector3<f64>, rho: &KinParams) -> bool {
        (bw - self.lin_bw).norm() > REINTEGRATE_BW
            || (rho.calf_length - self.lin_rho.calf_length).abs() > REINTEGRATE_RHO
    }

    pub fn eps_bw_jacobian(&self) -> Matrix3<f64> {
        self.j_aug.fixed_view::<3, 3>(EPS, BIAS_W).into_owned()
    }

    pub fn eps_rho_jacobian(&self) -> Vector3<f64> {
        self.j_aug.fixed_view::<3, 1>(EPS, RHO).into_owned()
    }

    pub(crate) fn corrected(&self, delta_bw: &Vector3<f64>, delta_rho: f64) -> Vector3<f64> {
        self.epsilon + self.eps_bw_jacobian() * delta_bw + self.eps_rho_jacobian() * delta_rho
    }

    pub fn apply_leg_correction(&self, delta_bw: &Vector3<f64>, delta_rho: f64) -> Result<Vector3<f64>> {
        let nw = delta_bw.norm();
        if nw > REINTEGRATE_BW {
            return Err(Error::ReintegrationRequired {
                what: "gyro bias delta",
                norm: nw,
                limit: REINTEGRATE_BW,
            });
        }
        if delta_rho.abs() > REINTEGRATE_RHO {
            return Err(Error::ReintegrationRequired {
                what: "calf length delta",
                norm: delta_rho.abs(),
                limit: REINTEGRATE_RHO,
            });
        }
        Ok(self.corrected(delta_bw, delta_rho))
    }

    /// Covariance of `[δε, δρ]`.
    pub fn eps_rho_covariance(&self) -> Matrix4<f64> {
        self.p_aug.fixed_view::<4, 4>(EPS, EPS).into_owned()
    }

    /// `[displacement; ρ₁ − ρ₀]` between two keyframes.
    pub fn residual(&self, xk: &RobotState, xk1: &RobotState) -> Vector4<f64> {
        self.residual_and_jacobian(xk, xk1).0
    }

    /// Residual and its Jacobian with respect to
    /// `[δp₀, δθ₀, δb_ω₀, δρ₀, δp₁, δρ₁]` (4×14).
    pub fn residual_and_jacobian(
        &self,
        xk: &RobotState,
        xk1: &RobotState,
    ) -> (Vector4<f64>, SMatrix<f64, 4, 14>) {
        let rho0 = xk.rho[self.leg].calf_length;
        let rho1 = xk1.rho[self.leg].calf_length;
        let eps = self.corrected(&(xk.bw - self.lin_bw), rho0 - self.lin_rho.calf_length);
        let rk_t = xk.q.rotation_matrix().transpose();
        let disp = rk_t * (xk1.p - xk.p);
        let d = disp - eps;
        let r = Vector4::new(d.x, d.y, d.z, rho1 - rho0);

        let mut j = SMatrix::<f64, 4, 14>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rk_t));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&disp));
        j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-self.eps_bw_jacobian()));
        j.fixed_view_mut::<3, 1>(0, 9).copy_from(&(-self.eps_rho_jacobian()));
        j.fixed_view_mut::<3, 3>(0, 10).copy_from(&rk_t);
        j[(3, 9)] = -1.0;
        j[(3, 13)] = 1.0;
        (r, j)
    }
}

pub fn integrate_leg_sample(
    pre: &mut LegPreintegration,
    r: &LegReading,
    step: &ImuStep,
    geom: &LegGeometry,
    noise: &LegNoise,
) -> Result<()> {
    pre.integrate_leg_sample(r, step, geom, noise)
}

pub fn leg_residual(pre: &LegPreintegration, xk: &RobotState, xk1: &RobotState) -> Vector4<f64> {
    pre.residual(xk, xk1)
}

pub fn apply_leg_correction(
    pre: &LegPreintegration,
    delta_bw: &Vector3<f64>,
    delta_rho: f64,
) -> Result<Vector3<f64>> {
    pre.apply_leg_correction(delta_bw, delta_rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu_preint::{ImuNoise, ImuPreintegration, ImuSample};
    use crate::so3::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const DT: f64 = 0.002;
    const LEG: usize = 0;

    fn geom() -> LegGeometry {
        LegGeometry::a1_like(0.21)[LEG]
    }

    /// Smooth stance-like joint motion and body rates.
    fn stream(rng: &mut impl Rng, n: usize, contact: impl Fn(usize) -> bool) -> Vec<(ImuSample, LegReading)> {
        let amp: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let freq: [f64; 9] = std::array::from_fn(|_| rng.random_range(1.0..4.0));
        let base = [0.05, 0.7, -1.4];
        (0..n)
            .map(|i| {
                let t = i as f64 * DT;
                let mut phi = [0.0; 3];
                let mut dphi = [0.0; 3];
                for k in 0..3 {
                    phi[k] = base[k] + 0.2 * amp[k] * (freq[k] * t).sin();
                    dphi[k] = 0.2 * amp[k] * freq[k] * (freq[k] * t).cos();
                }
                let gyro = Vector3::from_fn(|k, _| 0.5 * amp[3 + k] * (freq[3 + k] * t).cos());
                let accel = Vector3::new(0.0, 0.0, 9.81)
                    + Vector3::from_fn(|k, _| amp[6 + k] * (freq[6 + k] * t).sin());
                (
                    ImuSample { t, accel, gyro },
                    LegReading {
                        t,
                        joint: JointState { phi, dphi },
                        contact: contact(i),
                        gyro,
                    },
                )
            })
            .collect()
    }

    fn run(
        data: &[(ImuSample, LegReading)],
        rho: f64,
        bw: Vector3<f64>,
        noise: &LegNoise,
        imu_noise: &ImuNoise,
    ) -> (ImuPreintegration, LegPreintegration) {
        let g = geom();
        let mut imu = ImuPreintegration::new(data[0].0, Vector3::zeros(), bw);
        let mut leg = LegPreintegration::new(LEG, data[0].1, &g, KinParams::new(rho), bw);
        for w in data.windows(2) {
            let step = imu.integrate_sample(&w[1].0, w[1].0.t - w[0].0.t, imu_noise).unwrap();
            leg.integrate_leg_sample(&w[1].1, &step, &g, noise).unwrap();
        }
        (imu, leg)
    }

    #[test]
    fn contact_noise_selection() {
        let n = LegNoise {
            sigma_rho_contact: 1e-4,
            sigma_rho_nocontact: 1e2,
            sigma_v_contact: 1e-3,
            sigma_v_nocontact: 1e3,
            ..LegNoise::default()
        };
        assert_eq!(contact_noise(true, &n).sigma_rho, 1e-4);
        assert_eq!(contact_noise(false, &n).sigma_v, 1e3);
        assert_eq!(contact_noise(true, &n).sigma_v, 1e-3);
        assert_eq!(contact_noise(false, &n).sigma_rho, 1e2);
        assert!(LegNoise::default().validate().is_ok());
        let bad = LegNoise {
            sigma_v_contact: 1e3,
            ..LegNoise::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stationary_leg_gives_zero_displacement() {
        let joint = JointState {
            phi: [0.1, 0.8, -1.5],
            dphi: [0.0; 3],
        };
        let data: Vec<_> = (0..200)
            .map(|i| {
                let t = i as f64 * DT;
                (
                    ImuSample {
                        t,
                        accel: Vector3::new(0.0, 0.0, 9.81),
                        gyro: Vector3::zeros(),
                    },
                    LegReading {
                        t,
                        joint,
                        contact: true,
                        gyro: Vector3::zeros(),
                    },
                )
            })
            .collect();
        let (_, leg) = run(&data, 0.21, Vector3::zeros(), &LegNoise::default(), &ImuNoise::default());
        assert!(leg.epsilon.norm() < 1e-10);
        assert_eq!(leg.contact_ratio(), 1.0);
    }

    #[test]
    fn initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = stream(&mut rng, 1, |_| true);
        let leg = LegPreintegration::new(LEG, data[0].1, &geom(), KinParams::new(0.21), Vector3::zeros());
        assert_eq!(leg.epsilon, Vector3::zeros());
        assert_eq!(leg.p_aug, Mat19::zeros());
        assert_eq!(leg.j_aug, Mat19::identity());
    }

    #[test]
    fn velocity_partials_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = geom();
        let h = 1e-6;
        for _ in 0..200 {
            let joint = JointState {
                phi: [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.2..1.2),
                    rng.random_range(-2.2..-0.8),
                ],
                dphi: std::array::from_fn(|_| rng.random_range(-3.0..3.0)),
            };
            let w = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let rho = KinParams::new(rng.random_range(0.18..0.25));
            let t = LegTerms::new(&g, &joint, &rho, &w);
            let v = |j: &JointState, r: f64, w: &Vector3<f64>| {
                LegTerms::new(&g, j, &KinParams::new(r), w).v
            };
            // b_ω enters as ω - b_ω.
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let fd = (v(&joint, rho.calf_length, &(w - d)) - v(&joint, rho.calf_length, &(w + d)))
                    / (2.0 * h);
                let an = t.dv_dbw.column(k);
                assert!((fd - an).norm() <= 1e-6 * an.norm().max(1e-3));

                let (mut jp, mut jm) = (joint, joint);
                jp.phi[k] += h;
                jm.phi[k] -= h;
                let fd = (v(&jp, rho.calf_length, &w) - v(&jm, rho.calf_length, &w)) / (2.0 * h);
                let an = t.dv_dphi.column(k);
                assert!((fd - an).norm() <= 1e-5 * an.norm().max(1e-3));
            }
            let fd = (v(&joint, rho.calf_length + h, &w) - v(&joint, rho.calf_length - h, &w)) / (2.0 * h);
            assert!((fd - t.dv_drho).norm() <= 1e-5 * t.dv_drho.norm().max(1e-3));
        }
    }

    #[test]
    fn augmented_jacobian_matches_reintegration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = LegNoise::default();
        let imu_noise = ImuNoise::default();
        let h = 1e-6;
        for _ in 0..100 {
            let data = stream(&mut rng, 40, |_| true);
            let rho = rng.random_range(0.18..0.25);
            let bw = Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01));
            let (_, leg) = run(&data, rho, bw, &noise, &imu_noise);

            let ep = run(&data, rho + h, bw, &noise, &imu_noise).1.epsilon;
            let em = run(&data, rho - h, bw, &noise, &imu_noise).1.epsilon;
            let fd = (ep - em) / (2.0 * h);
            let an = leg.eps_rho_jacobian();
            assert!((fd - an).norm() / an.norm() < 1e-4, "{fd} vs {an}");

            let jbw = leg.eps_bw_jacobian();
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let ep = run(&data, rho, bw + d, &noise, &imu_noise).1.epsilon;
                let em = run(&data, rho, bw - d, &noise, &imu_noise).1.epsilon;
                let fd = (ep - em) / (2.0 * h);
                assert!((fd - jbw.column(k)).norm() / jbw.norm() < 1e-4);
            }
            // Nothing else in the ε row but δθ, which starts at zero.
            assert!(leg.j_aug.fixed_view::<3, 6>(EPS, 0).norm() == 0.0);
            assert!(leg.j_aug.fixed_view::<3, 3>(EPS, 9).norm() == 0.0);
        }
    }

    #[test]
    fn first_order_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = LegNoise::default();
        let imu_noise = ImuNoise::default();
        let data = stream(&mut rng, 60, |_| true);
        let (imu, leg) = run(&data, 0.21, Vector3::zeros(), &noise, &imu_noise);
        assert_eq!(leg.apply_leg_correction(&Vector3::zeros(), 0.0).unwrap(), leg.epsilon);

        let re = run(&data, 0.211, Vector3::zeros(), &noise, &imu_noise).1;
        let c = leg.apply_leg_correction(&Vector3::zeros(), 1e-3).unwrap();
        assert!((c - re.epsilon).norm() < 1e-6);

        for _ in 0..10 {
            let dbw = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * 1e-3;
            let (re_imu, steps) = imu
                .reintegrated_with_steps(Vector3::zeros(), dbw, &imu_noise)
                .unwrap();
            let re = leg
                .reintegrated(&steps, &geom(), leg.lin_rho, dbw, &noise)
                .unwrap();
            assert_eq!(re_imu.lin_bw, dbw);
            let c = leg.apply_leg_correction(&dbw, 0.0).unwrap();
            assert!((c - re.epsilon).norm() < 1e-5);
        }
        assert!(leg.apply_leg_correction(&Vector3::zeros(), 0.1).is_err());
        assert!(leg.apply_leg_correction(&Vector3::new(0.0, 0.02, 0.0), 0.0).is_err());
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = stream(&mut rng, 1, |_| true);
        let leg = LegPreintegration::new(LEG, data[0].1, &geom(), KinParams::new(0.21), Vector3::zeros());
        let x = RobotState::new(
            Vector3::new(1.0, 2.0, 0.3),
            UnitQuaternion::from_yaw_pitch_roll(0.3, 0.1, -0.2),
            Vector3::zeros(),
            0.21,
        );
        assert_eq!(leg.residual(&x, &x), Vector4::zeros());
        let mut x1 = x;
        x1.rho[LEG] = KinParams::new(0.212);
        let r = leg.residual(&x, &x1);
        assert!((r - Vector4::new(0.0, 0.0, 0.0, 0.002)).norm() < 1e-15);
    }

    #[test]
    fn residual_jacobian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = stream(&mut rng, 40, |_| true);
        let (_, leg) = run(&data, 0.21, Vector3::zeros(), &LegNoise::default(), &ImuNoise::default());
        let h = 1e-6;
        for _ in 0..100 {
            let mut x0 = RobotState::new(
                Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                UnitQuaternion::from_rotation_vector(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))),
                Vector3::zeros(),
                rng.random_range(0.19..0.23),
            );
            x0.bw = Vector3::from_fn(|_, _| rng.random_range(-0.005..0.005));
            let mut x1 = x0;
            x1.p += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
            x1.rho[LEG].calf_length += 1e-3;
            let (_, jac) = leg.residual_and_jacobian(&x0, &x1);
            let perturb = |col: usize, s: f64| {
                let (mut a, mut b) = (x0, x1);
                match col {
                    0..=2 => a.p[col] += s,
                    3..=5 => {
                        let mut d = Vector3::zeros();
                        d[col - 3] = s;
                        a.q = a.q.boxplus(&d);
                    }
                    6..=8 => a.bw[col - 6] += s,
                    9 => a.rho[LEG].calf_length += s,
                    10..=12 => b.p[col - 10] += s,
                    _ => b.rho[LEG].calf_length += s,
                }
                leg.residual(&a, &b)
            };
            for col in 0..14 {
                let fd = (perturb(col, h) - perturb(col, -h)) / (2.0 * h);
                let an = jac.column(col);
                assert!((fd - an).norm() <= 1e-4 * an.norm().max(1e-3), "col {col}");
            }
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = stream(&mut rng, 150, |i| (i / 30) % 2 == 0);
        let g = geom();
        let noise = LegNoise::default();
        let mut imu = ImuPreintegration::new(data[0].0, Vector3::zeros(), Vector3::zeros());
        let mut leg = LegPreintegration::new(LEG, data[0].1, &g, KinParams::new(0.21), Vector3::zeros());
        for w in data.windows(2) {
            let step = imu.integrate_sample(&w[1].0, DT, &ImuNoise::default()).unwrap();
            leg.integrate_leg_sample(&w[1].1, &step, &g, &noise).unwrap();
            assert_eq!(leg.p_aug, leg.p_aug.transpose());
            let scale = leg.p_aug.diagonal().max();
            assert!(leg.p_aug.symmetric_eigenvalues().min() >= -1e-12 * scale.max(1.0));
        }
        // IMU blocks are a read-only copy of the IMU propagation.
        assert!((leg.p_aug.fixed_view::<15, 15>(0, 0) - imu.cov).norm() <= 1e-12 * imu.cov.norm());
    }

    #[test]
    fn swing_carries_far_less_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stance = stream(&mut rng, 34, |_| true);
        let swing: Vec<_> = stance
            .iter()
            .map(|(i, l)| (*i, LegReading { contact: false, ..*l }))
            .collect();
        let info = |d: &[(ImuSample, LegReading)]| {
            let (_, leg) = run(d, 0.21, Vector3::zeros(), &LegNoise::default(), &ImuNoise::default());
            let cov = leg.p_aug.fixed_view::<3, 3>(EPS, EPS).into_owned();
            cov.try_inverse().unwrap().symmetric_eigenvalues().max()
        };
        let ratio = info(&stance) / info(&swing);
        assert!(ratio >= 1e6, "ratio {ratio:e}");
    }

    fn gauss3(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from_fn(|_, _| StandardNormal.sample(rng))
    }

    /// Independent midpoint displacement integrator on rotation matrices.
    fn oracle_epsilon(g: &LegGeometry, imu: &[ImuSample], legs: &[LegReading], rho: &[f64]) -> Vector3<f64> {
        let vel = |r: &LegReading, rho: f64| {
            let phi = r.joint.angles();
            let foot = forward_kinematics(g, &phi, &KinParams::new(rho));
            let jac = leg_jacobian(g, &phi, &KinParams::new(rho));
            -(jac * r.joint.rates() + r.gyro.cross(&foot))
        };
        let mut rot = Matrix3::identity();
        let mut eps = Vector3::zeros();
        for i in 1..imu.len() {
            let dt = imu[i].t - imu[i - 1].t;
            let u = (0.5 * (imu[i - 1].gyro + imu[i].gyro)) * (0.5 * dt);
            let ux = skew(&u);
            let rot1 = rot * (Matrix3::identity() + 2.0 * (ux + ux * ux) / (1.0 + u.norm_squared()));
            eps += 0.5 * dt * (rot * vel(&legs[i - 1], rho[i - 1]) + rot1 * vel(&legs[i], rho[i]));
            rot = rot1;
        }
        eps
    }

    #[test]
    fn epsilon_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = stream(&mut rng, 101, |_| true);
        let g = geom();
        let noise = LegNoise {
            sigma_phi: 1e-2,
            sigma_dphi: 5e-2,
            sigma_v_contact: 2e-3,
            sigma_v_nocontact: 1.0,
            sigma_rho_contact: 2e-2,
            sigma_rho_nocontact: 1.0,
        };
        let imu_noise = ImuNoise {
            sigma_a: 0.02,
            sigma_w: 5e-3,
            sigma_ba: 2e-3,
            sigma_bw: 5e-4,
        };
        let (_, leg) = run(&data, 0.21, Vector3::zeros(), &noise, &imu_noise);
        let model = leg.p_aug.fixed_view::<3, 3>(EPS, EPS).into_owned();

        let imu: Vec<_> = data.iter().map(|d| d.0).collect();
        let legs: Vec<_> = data.iter().map(|d| d.1).collect();
        let nominal = oracle_epsilon(&g, &imu, &legs, &vec![0.21; imu.len()]);
        let draws = 20_000;
        let mut acc = Matrix3::zeros();
        let (mut nimu, mut nlegs) = (imu.clone(), legs.clone());
        let mut rho = vec![0.21; imu.len()];
        for _ in 0..draws {
            let mut bw = Vector3::zeros();
            let mut vel_noise = Vector3::zeros();
            for i in 0..imu.len() {
                if i > 0 {
                    bw += gauss3(&mut rng) * (imu_noise.sigma_bw * DT.sqrt());
                    rho[i] = rho[i - 1] + noise.sigma_rho_contact * DT.sqrt() * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    };
                    vel_noise += gauss3(&mut rng) * (noise.sigma_v_contact * DT);
                }
                let gyro = imu[i].gyro + bw + gauss3(&mut rng) * (imu_noise.sigma_w / DT.sqrt());
                nimu[i].gyro = gyro;
                nlegs[i].gyro = gyro;
                let dp = gauss3(&mut rng) * noise.sigma_phi;
                let dd = gauss3(&mut rng) * noise.sigma_dphi;
                for k in 0..3 {
                    nlegs[i].joint.phi[k] = legs[i].joint.phi[k] + dp[k];
                    nlegs[i].joint.dphi[k] = legs[i].joint.dphi[k] + dd[k];
                }
            }
            let e = oracle_epsilon(&g, &nimu, &nlegs, &rho) + vel_noise - nominal;
            acc += e * e.transpose();
        }
        let mc = acc / draws as f64;
        let trace_err = (mc.trace() - model.trace()).abs() / model.trace();
        assert!(trace_err < 0.15, "trace error {trace_err}: mc {mc} model {model}");
    }
}
