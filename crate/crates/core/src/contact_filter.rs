//! Error-state Kalman filter on IMU propagation with leg-odometry velocity
//! updates. Used as the KF baseline and as the contact-outlier gate.
//!
//! Error state order: `[δp, δv, δθ, δb_a, δb_ω]`, `δθ` a right perturbation.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_preint::{ImuNoise, ImuSample};
use crate::kinematics::{forward_kinematics, leg_jacobian, KinParams, LegGeometry, NUM_LEGS};
use crate::leg_preint::LegSample;
use crate::so3::{cayley, skew, UnitQuaternion};

const P: usize = 0;
const V: usize = 3;
const TH: usize = 6;
const BA: usize = 9;
const BW: usize = 12;

pub type Mat15 = SMatrix<f64, 15, 15>;

/// χ² quantile, 3 DOF, 1% tail.
pub const DEFAULT_GATE: f64 = 11.34;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion,
    pub ba: Vector3<f64>,
    pub bw: Vector3<f64>,
    pub sigma: Mat15,
}

impl FilterState {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, q: UnitQuaternion, sigma: Mat15) -> Self {
        FilterState {
            p,
            v,
            q,
            ba: Vector3::zeros(),
            bw: Vector3::zeros(),
            sigma,
        }
    }

    fn inject(&mut self, dx: &SVector<f64, 15>) {
        self.p += dx.fixed_rows::<3>(P);
        self.v += dx.fixed_rows::<3>(V);
        self.q = self.q.boxplus(&dx.fixed_rows::<3>(TH).into_owned());
        self.ba += dx.fixed_rows::<3>(BA);
        self.bw += dx.fixed_rows::<3>(BW);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Mahalanobis gate on the LO-velocity innovation.
    pub gate: f64,
    /// LO-velocity measurement standard deviation, m/s.
    pub sigma_v: f64,
    pub init_sigma_p: f64,
    pub init_sigma_v: f64,
    pub init_sigma_theta: f64,
    pub init_sigma_ba: f64,
    pub init_sigma_bw: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            gate: DEFAULT_GATE,
            sigma_v: 1e-2,
            init_sigma_p: 1e-4,
            init_sigma_v: 1e-2,
            init_sigma_theta: 1e-3,
            init_sigma_ba: 1e-2,
            init_sigma_bw: 1e-3,
        }
    }
}

impl FilterConfig {
    pub fn initial_covariance(&self) -> Mat15 {
        let mut d = SVector::<f64, 15>::zeros();
        let s = [
            self.init_sigma_p,
            self.init_sigma_v,
            self.init_sigma_theta,
            self.init_sigma_ba,
            self.init_sigma_bw,
        ];
        for (b, s) in s.iter().enumerate() {
            d.fixed_rows_mut::<3>(3 * b).fill(s * s);
        }
        Mat15::from_diagonal(&d)
    }
}

/// Euler step with the sample held over `dt`.
pub fn ekf_predict(
    state: &FilterState,
    s: &ImuSample,
    dt: f64,
    noise: &ImuNoise,
    gravity_w: &Vector3<f64>,
) -> Result<FilterState> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    let rot = state.q.rotation_matrix();
    let acc = s.accel - state.ba;
    let half = 0.5 * dt * (s.gyro - state.bw);
    let inc = cayley(&half);
    let a_w = rot * acc - gravity_w;

    let mut out = state.clone();
    out.p += state.v * dt + 0.5 * a_w * dt * dt;
    out.v += a_w * dt;
    out.q = state.q.product(&inc);

    let m = -(Matrix3::identity() - skew(&half)) * (dt / (1.0 + half.norm_squared()));
    let mut f = Mat15::identity();
    let dv_dth = -rot * skew(&acc) * dt;
    f.fixed_view_mut::<3, 3>(P, V).copy_from(&(Matrix3::identity() * dt));
    f.fixed_view_mut::<3, 3>(P, TH).copy_from(&(0.5 * dt * dv_dth));
    f.fixed_view_mut::<3, 3>(P, BA).copy_from(&(-0.5 * rot * dt * dt));
    f.fixed_view_mut::<3, 3>(V, TH).copy_from(&dv_dth);
    f.fixed_view_mut::<3, 3>(V, BA).copy_from(&(-rot * dt));
    f.fixed_view_mut::<3, 3>(TH, TH)
        .copy_from(&inc.rotation_matrix().transpose());
    f.fixed_view_mut::<3, 3>(TH, BW).copy_from(&m);

    let mut g = SMatrix::<f64, 15, 12>::zeros();
    g.fixed_view_mut::<3, 3>(P, 0).copy_from(&(-0.5 * rot * dt * dt));
    g.fixed_view_mut::<3, 3>(V, 0).copy_from(&(-rot * dt));
    g.fixed_view_mut::<3, 3>(TH, 3).copy_from(&m);
    g.fixed_view_mut::<3, 3>(BA, 6).copy_from(&(Matrix3::identity() * dt));
    g.fixed_view_mut::<3, 3>(BW, 9).copy_from(&(Matrix3::identity() * dt));
    let q = noise.discrete_diag(dt);
    let mut gq = g;
    for c in 0..12 {
        gq.column_mut(c).scale_mut(q[c / 3]);
    }
    let sigma = f * state.sigma * f.transpose() + gq * g.transpose();
    out.sigma = 0.5 * (sigma + sigma.transpose());
    Ok(out)
}

struct Innovation {
    y: Vector3<f64>,
    h: SMatrix<f64, 3, 15>,
    s: Matrix3<f64>,
}

impl Innovation {
    fn mahalanobis(&self) -> f64 {
        match self.s.cholesky() {
            Some(ch) => self.y.dot(&ch.solve(&self.y)),
            None => f64::INFINITY,
        }
    }
}

/// `y = A(q) v_lo − v` and its Jacobian with respect to the error state.
fn innovation(
    state: &FilterState,
    leg: &LegSample,
    idx: usize,
    geom: &LegGeometry,
    rho: &KinParams,
    sigma_v: f64,
) -> Innovation {
    let joint = &leg.joints[idx];
    let phi = joint.angles();
    let foot = forward_kinematics(geom, &phi, rho);
    let jac = leg_jacobian(geom, &phi, rho);
    let w = leg.gyro - state.bw;
    let v_b = -(jac * joint.rates() + w.cross(&foot));
    let rot = state.q.rotation_matrix();
    let y = rot * v_b - state.v;

    let mut h = SMatrix::<f64, 3, 15>::zeros();
    h.fixed_view_mut::<3, 3>(0, V).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(0, TH).copy_from(&(rot * skew(&v_b)));
    h.fixed_view_mut::<3, 3>(0, BW).copy_from(&(rot * skew(&foot)));
    let s = h * state.sigma * h.transpose() + Matrix3::identity() * (sigma_v * sigma_v);
    Innovation { y, h, s }
}

/// Squared Mahalanobis distance of the LO-velocity innovation of one leg.
pub fn innovation_distance(
    state: &FilterState,
    leg: &LegSample,
    idx: usize,
    geom: &LegGeometry,
    rho: &KinParams,
    sigma_v: f64,
) -> f64 {
    innovation(state, leg, idx, geom, rho, sigma_v).mahalanobis()
}

/// Keeps a stance flag only while the leg's LO velocity agrees with the
/// filter; swing flags are never promoted.
#[allow(clippy::too_many_arguments)]
pub fn detect_contact(
    state: &FilterState,
    leg: &LegSample,
    idx: usize,
    geom: &LegGeometry,
    rho: &KinParams,
    prior_contact: bool,
    sigma_v: f64,
    gate: f64,
) -> bool {
    prior_contact && innovation_distance(state, leg, idx, geom, rho, sigma_v) <= gate
}

/// Joseph-form update with one leg. Returns `None` when the leg is not in
/// contact or fails the gate.
#[allow(clippy::too_many_arguments)]
pub fn ekf_update_leg(
    state: &FilterState,
    leg: &LegSample,
    idx: usize,
    geom: &LegGeometry,
    rho: &KinParams,
    contact: bool,
    sigma_v: f64,
    gate: f64,
) -> Option<FilterState> {
    if !contact {
        return None;
    }
    let inn = innovation(state, leg, idx, geom, rho, sigma_v);
    if inn.mahalanobis() > gate {
        return None;
    }
    let ch = inn.s.cholesky()?;
    // K = Σ Hᵀ S⁻¹
    let pht = state.sigma * inn.h.transpose();
    let k = ch.solve(&pht.transpose()).transpose();
    let dx = k * inn.y;
    let ikh = Mat15::identity() - k * inn.h;
    let r = Matrix3::identity() * (sigma_v * sigma_v);
    let sigma = ikh * state.sigma * ikh.transpose() + k * r * k.transpose();
    let mut out = state.clone();
    out.inject(&dx);
    out.sigma = 0.5 * (sigma + sigma.transpose());
    Some(out)
}

/// Stateful driver: predict on every IMU tick, gate and fuse each leg.
#[derive(Debug, Clone)]
pub struct ContactFilter {
    pub state: FilterState,
    pub config: FilterConfig,
    pub imu_noise: ImuNoise,
    pub geoms: [LegGeometry; NUM_LEGS],
    pub rho: [KinParams; NUM_LEGS],
    pub gravity_w: Vector3<f64>,
    /// When false the sensor contact flags are trusted as is.
    pub reject_outliers: bool,
    last: Option<ImuSample>,
}

impl ContactFilter {
    pub fn new(
        state: FilterState,
        config: FilterConfig,
        imu_noise: ImuNoise,
        geoms: [LegGeometry; NUM_LEGS],
        rho: [KinParams; NUM_LEGS],
        gravity_w: Vector3<f64>,
    ) -> Self {
        ContactFilter {
            state,
            config,
            imu_noise,
            geoms,
            rho,
            gravity_w,
            reject_outliers: true,
            last: None,
        }
    }

    /// Processes one synchronized IMU and leg tick and returns the contact
    /// flags used for it.
    pub fn step(&mut self, imu: &ImuSample, leg: &LegSample) -> Result<[bool; NUM_LEGS]> {
        if let Some(prev) = self.last {
            let dt = imu.t - prev.t;
            self.state = ekf_predict(&self.state, &prev, dt, &self.imu_noise, &self.gravity_w)?;
        }
        self.last = Some(*imu);
        let gate = if self.reject_outliers {
            self.config.gate
        } else {
            f64::INFINITY
        };
        let mut flags = [false; NUM_LEGS];
        for (i, flag) in flags.iter_mut().enumerate() {
            // Gate every leg against the same predicted state.
            *flag = detect_contact(
                &self.state,
                leg,
                i,
                &self.geoms[i],
                &self.rho[i],
                leg.contact[i],
                self.config.sigma_v,
                gate,
            );
        }
        for (i, flag) in flags.iter().enumerate() {
            if let Some(s) = ekf_update_leg(
                &self.state,
                leg,
                i,
                &self.geoms[i],
                &self.rho[i],
                *flag,
                self.config.sigma_v,
                f64::INFINITY,
            ) {
                self.state = s;
            }
        }
        if !self.state.p.iter().chain(self.state.v.iter()).all(|x| x.is_finite()) {
            return Err(Error::Diverged(format!("contact filter at t = {}", imu.t)));
        }
        Ok(flags)
    }
}
