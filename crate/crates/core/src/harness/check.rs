//! Self-tests behind `vilo check`: analytic derivatives against central
//! differences, and preintegration covariances against Monte-Carlo draws
//! through independent integrators.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::camera::CameraModel;
use crate::error::Result;
use crate::factor_graph::vision_residual;
use crate::imu_preint::{ImuNoise, ImuPreintegration, ImuSample, BIAS_A};
use crate::kinematics::{
    forward_kinematics, kinematic_partials, leg_jacobian, JointState, KinParams, LegGeometry,
};
use crate::leg_preint::{LegNoise, LegPreintegration, LegReading, LegTerms};
use crate::so3::{skew, UnitQuaternion};
use crate::state::{gravity_world, RobotState};

pub const DERIVATIVE_TOL: f64 = 1e-4;
pub const COVARIANCE_TOL: f64 = 0.15;

const H: f64 = 1e-6;
const DT: f64 = 0.002;
const LEG: usize = 0;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Random instances per derivative check.
    pub instances: usize,
    /// Monte-Carlo draws per covariance check.
    pub draws: usize,
    /// Integration steps of the covariance checks.
    pub steps: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            instances: 100,
            draws: 20_000,
            steps: 100,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest relative error over the cases.
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn timed(name: &'static str, cases: usize, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> Result<CheckResult> {
    let start = Instant::now();
    let worst = f()?;
    Ok(CheckResult {
        name,
        cases,
        worst,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Central differences of `f` around a zero perturbation.
fn numeric(n: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            let mut d = DVector::zeros(n);
            d[k] = H;
            let plus = f(&d);
            d[k] = -H;
            (plus - f(&d)) / (2.0 * H)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn rel_err(fd: &DMatrix<f64>, an: &DMatrix<f64>) -> f64 {
    (fd - an).norm() / an.norm().max(1e-8)
}

fn v3(d: &DVector<f64>, at: usize) -> Vector3<f64> {
    Vector3::new(d[at], d[at + 1], d[at + 2])
}

fn stack(parts: &[&[f64]]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

fn uniform3(rng: &mut impl Rng, r: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-r..r))
}

fn geom() -> LegGeometry {
    LegGeometry::a1_like(0.21)[LEG]
}

fn random_joint(rng: &mut impl Rng) -> JointState {
    JointState {
        phi: [
            rng.random_range(-0.3..0.3),
            rng.random_range(0.2..1.2),
            rng.random_range(-2.2..-0.8),
        ],
        dphi: std::array::from_fn(|_| rng.random_range(-3.0..3.0)),
    }
}

fn random_state(rng: &mut impl Rng) -> RobotState {
    let mut x = RobotState::new(
        uniform3(rng, 1.0),
        UnitQuaternion::from_rotation_vector(&uniform3(rng, 1.0)),
        uniform3(rng, 1.0),
        rng.random_range(0.19..0.23),
    );
    x.ba = uniform3(rng, 0.05);
    x.bw = uniform3(rng, 0.005);
    x
}

/// Smooth IMU and stance-leg readings sharing one gyro.
fn stream(rng: &mut impl Rng, n: usize) -> Vec<(ImuSample, LegReading)> {
    let amp: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let freq: [f64; 9] = std::array::from_fn(|_| rng.random_range(1.0..4.0));
    let base = [0.05, 0.7, -1.4];
    (0..n)
        .map(|i| {
            let t = i as f64 * DT;
            let mut joint = JointState::default();
            for k in 0..3 {
                joint.phi[k] = base[k] + 0.2 * amp[k] * (freq[k] * t).sin();
                joint.dphi[k] = 0.2 * amp[k] * freq[k] * (freq[k] * t).cos();
            }
            let gyro = Vector3::from_fn(|k, _| 0.5 * amp[3 + k] * (freq[3 + k] * t).cos());
            let accel = gravity_world() + Vector3::from_fn(|k, _| amp[6 + k] * (freq[6 + k] * t).sin());
            (
                ImuSample { t, accel, gyro },
                LegReading {
                    t,
                    joint,
                    contact: true,
                    gyro,
                },
            )
        })
        .collect()
}

fn preintegrate(
    data: &[(ImuSample, LegReading)],
    ba: Vector3<f64>,
    bw: Vector3<f64>,
    rho: f64,
    imu_noise: &ImuNoise,
    leg_noise: &LegNoise,
) -> Result<(ImuPreintegration, LegPreintegration)> {
    let g = geom();
    let mut imu = ImuPreintegration::new(data[0].0, ba, bw);
    let mut leg = LegPreintegration::new(LEG, data[0].1, &g, KinParams::new(rho), bw);
    for w in data.windows(2) {
        let step = imu.integrate_sample(&w[1].0, w[1].0.t - w[0].0.t, imu_noise)?;
        leg.integrate_leg_sample(&w[1].1, &step, &g, leg_noise)?;
    }
    Ok((imu, leg))
}

fn worst_of(cases: usize, mut f: impl FnMut() -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        worst = worst.max(f()?);
    }
    Ok(worst)
}

pub fn derivative_checks(o: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let rng = &mut rng;
    let n = o.instances;
    let g = geom();
    let imu_noise = ImuNoise::default();
    let leg_noise = LegNoise::default();
    let mut out = Vec::new();

    out.push(timed("leg jacobian dg/dphi", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let phi = random_joint(rng).angles();
            let rho = KinParams::new(rng.random_range(0.15..0.3));
            let fd = numeric(3, |d| {
                let f = forward_kinematics(&g, &(phi + v3(d, 0)), &rho);
                DVector::from_column_slice(f.as_slice())
            });
            let an = leg_jacobian(&g, &phi, &rho);
            Ok(rel_err(&fd, &DMatrix::from_column_slice(3, 3, an.as_slice())))
        })
    })?);

    out.push(timed("kinematic partials d[g, vec J]/d[phi, rho]", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let phi = random_joint(rng).angles();
            let rho = rng.random_range(0.15..0.3);
            let fd = numeric(4, |d| {
                let (p, r) = (phi + v3(d, 0), KinParams::new(rho + d[3]));
                let f = forward_kinematics(&g, &p, &r);
                let j = leg_jacobian(&g, &p, &r);
                stack(&[f.as_slice(), j.as_slice()])
            });
            let k = kinematic_partials(&g, &phi, &KinParams::new(rho));
            let j = leg_jacobian(&g, &phi, &KinParams::new(rho));
            let mut an = DMatrix::zeros(12, 4);
            an.view_mut((0, 0), (3, 3)).copy_from(&j);
            an.view_mut((0, 3), (3, 1)).copy_from(&k.dg_drho);
            an.view_mut((3, 0), (9, 3)).copy_from(&k.dvecj_dphi);
            an.view_mut((3, 3), (9, 1)).copy_from(&k.dvecj_drho);
            Ok(rel_err(&fd, &an))
        })
    })?);

    out.push(timed("leg odometry velocity d v/d[phi, rho, bw]", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let joint = random_joint(rng);
            let w = uniform3(rng, 1.0);
            let rho = rng.random_range(0.18..0.25);
            let fd = numeric(7, |d| {
                let mut j = joint;
                for k in 0..3 {
                    j.phi[k] += d[k];
                }
                // b_ω enters as ω - b_ω.
                let v = LegTerms::new(&g, &j, &KinParams::new(rho + d[3]), &(w - v3(d, 4))).v;
                DVector::from_column_slice(v.as_slice())
            });
            let t = LegTerms::new(&g, &joint, &KinParams::new(rho), &w);
            let mut an = DMatrix::zeros(3, 7);
            an.view_mut((0, 0), (3, 3)).copy_from(&t.dv_dphi);
            an.view_mut((0, 3), (3, 1)).copy_from(&t.dv_drho);
            an.view_mut((0, 4), (3, 3)).copy_from(&t.dv_dbw);
            Ok(rel_err(&fd, &an))
        })
    })?);

    out.push(timed("imu preintegration bias jacobian", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let data = stream(rng, 50);
            let ba = uniform3(rng, 0.1);
            let bw = uniform3(rng, 0.01);
            let (pre, _) = preintegrate(&data, ba, bw, 0.21, &imu_noise, &leg_noise)?;
            let fd = numeric(6, |d| {
                let (p, _) = preintegrate(&data, ba + v3(d, 0), bw + v3(d, 3), 0.21, &imu_noise, &leg_noise)
                    .expect("small bias perturbation");
                let dth = pre.gamma.boxminus(&p.gamma).expect("small rotation");
                stack(&[(p.alpha - pre.alpha).as_slice(), (p.beta - pre.beta).as_slice(), dth.as_slice()])
            });
            let an = pre.jacobian.view((0, BIAS_A), (9, 6)).clone_owned();
            Ok(rel_err(&fd, &DMatrix::from_column_slice(9, 6, an.as_slice())))
        })
    })?);

    out.push(timed("imu residual jacobian", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let data = stream(rng, 60);
            let (pre, _) = preintegrate(&data, Vector3::zeros(), Vector3::zeros(), 0.21, &imu_noise, &leg_noise)?;
            let (x0, x1) = (random_state(rng), random_state(rng));
            let gw = gravity_world();
            let (_, jac) = pre.residual_and_jacobians(&x0, &x1, &gw, true)?;
            let jac = jac.expect("jacobian requested");
            let fd = numeric(30, |d| {
                let r = pre
                    .residual(&perturb(&x0, d, 0), &perturb(&x1, d, 15), &gw)
                    .expect("small perturbation");
                DVector::from_column_slice(r.as_slice())
            });
            Ok(rel_err(&fd, &DMatrix::from_column_slice(15, 30, jac.as_slice())))
        })
    })?);

    out.push(timed("leg preintegration jacobian d eps/d[bw, rho]", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let data = stream(rng, 40);
            let rho = rng.random_range(0.18..0.25);
            let bw = uniform3(rng, 0.01);
            let z = Vector3::zeros();
            let (_, leg) = preintegrate(&data, z, bw, rho, &imu_noise, &leg_noise)?;
            let fd = numeric(4, |d| {
                let (_, l) = preintegrate(&data, z, bw + v3(d, 0), rho + d[3], &imu_noise, &leg_noise)
                    .expect("small perturbation");
                DVector::from_column_slice(l.epsilon.as_slice())
            });
            let mut an = DMatrix::zeros(3, 4);
            an.view_mut((0, 0), (3, 3)).copy_from(&leg.eps_bw_jacobian());
            an.view_mut((0, 3), (3, 1)).copy_from(&leg.eps_rho_jacobian());
            Ok(rel_err(&fd, &an))
        })
    })?);

    out.push(timed("leg residual jacobian", n, DERIVATIVE_TOL, || {
        worst_of(n, || {
            let data = stream(rng, 40);
            let z = Vector3::zeros();
            let (_, leg) = preintegrate(&data, z, z, 0.21, &imu_noise, &leg_noise)?;
            let x0 = random_state(rng);
            let mut x1 = x0;
            x1.p += uniform3(rng, 0.05);
            x1.rho[LEG].calf_length += rng.random_range(-2e-3..2e-3);
            let (_, jac) = leg.residual_and_jacobian(&x0, &x1);
            // Columns: [δp₀, δθ₀, δb_ω₀, δρ₀, δp₁, δρ₁].
            let fd = numeric(14, |d| {
                let (mut a, mut b) = (x0, x1);
                a.p += v3(d, 0);
                a.q = a.q.boxplus(&v3(d, 3));
                a.bw += v3(d, 6);
                a.rho[LEG].calf_length += d[9];
                b.p += v3(d, 10);
                b.rho[LEG].calf_length += d[13];
                DVector::from_column_slice(leg.residual(&a, &b).as_slice())
            });
            Ok(rel_err(&fd, &DMatrix::from_column_slice(4, 14, jac.as_slice())))
        })
    })?);

    out.push(timed("vision residual jacobian", n, DERIVATIVE_TOL, || {
        let cam = CameraModel::default();
        worst_of(n, || {
            let x = random_state(rng);
            let depth = rng.random_range(1.0..10.0);
            let l_c = Vector3::new(rng.random_range(-0.5..0.5) * depth, rng.random_range(-0.4..0.4) * depth, depth);
            let l = x.p + x.q.rotate(&(cam.p_bc + cam.rotation_bc() * l_c));
            let obs = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4));
            let term = vision_residual(&x, &l, &obs, &cam).expect("landmark in front");
            let fd = numeric(9, |d| {
                let mut y = x;
                y.p += v3(d, 0);
                y.q = y.q.boxplus(&v3(d, 3));
                let r = vision_residual(&y, &(l + v3(d, 6)), &obs, &cam).expect("landmark in front");
                DVector::from_column_slice(r.residual.as_slice())
            });
            let mut an = DMatrix::zeros(2, 9);
            an.view_mut((0, 0), (2, 6)).copy_from(&term.d_pose);
            an.view_mut((0, 6), (2, 3)).copy_from(&term.d_landmark);
            Ok(rel_err(&fd, &an))
        })
    })?);
    Ok(out)
}

/// `[δp, δθ, δv, δb_a, δb_ω]` from `d[at..at + 15]`.
fn perturb(x: &RobotState, d: &DVector<f64>, at: usize) -> RobotState {
    let mut y = *x;
    y.p += v3(d, at);
    y.q = x.q.boxplus(&v3(d, at + 3));
    y.v += v3(d, at + 6);
    y.ba += v3(d, at + 9);
    y.bw += v3(d, at + 12);
    y
}

/// Cayley increment of half the mean rate, as a rotation matrix.
fn increment(w0: &Vector3<f64>, w1: &Vector3<f64>, dt: f64) -> Matrix3<f64> {
    let u = 0.5 * (w0 + w1) * (0.5 * dt);
    let ux = skew(&u);
    Matrix3::identity() + 2.0 * (ux + ux * ux) / (1.0 + u.norm_squared())
}

/// Midpoint integration on rotation matrices: `(α, β, R)`.
fn integrate_imu(s: &[ImuSample]) -> (Vector3<f64>, Vector3<f64>, Matrix3<f64>) {
    let (mut alpha, mut beta, mut rot) = (Vector3::zeros(), Vector3::zeros(), Matrix3::identity());
    for w in s.windows(2) {
        let dt = w[1].t - w[0].t;
        let rot1 = rot * increment(&w[0].gyro, &w[1].gyro, dt);
        let f = 0.5 * (rot * w[0].accel + rot1 * w[1].accel);
        alpha += beta * dt + 0.5 * f * dt * dt;
        beta += f * dt;
        rot = rot1;
    }
    (alpha, beta, rot)
}

/// Displacement implied by the leg readings, with a calf length per sample.
fn integrate_leg(g: &LegGeometry, imu: &[ImuSample], legs: &[LegReading], rho: &[f64]) -> Vector3<f64> {
    let vel = |r: &LegReading, rho: f64| {
        let phi = r.joint.angles();
        let k = KinParams::new(rho);
        -(leg_jacobian(g, &phi, &k) * r.joint.rates() + r.gyro.cross(&forward_kinematics(g, &phi, &k)))
    };
    let (mut rot, mut eps) = (Matrix3::identity(), Vector3::zeros());
    for i in 1..imu.len() {
        let dt = imu[i].t - imu[i - 1].t;
        let rot1 = rot * increment(&imu[i - 1].gyro, &imu[i].gyro, dt);
        eps += 0.5 * dt * (rot * vel(&legs[i - 1], rho[i - 1]) + rot1 * vel(&legs[i], rho[i]));
        rot = rot1;
    }
    eps
}

fn trace_error(mc: &DMatrix<f64>, model: &DMatrix<f64>) -> f64 {
    (mc.trace() - model.trace()).abs() / model.trace()
}

pub fn covariance_checks(o: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(1));
    let rng = &mut rng;
    let data = stream(rng, o.steps + 1);
    let imu: Vec<ImuSample> = data.iter().map(|d| d.0).collect();
    let legs: Vec<LegReading> = data.iter().map(|d| d.1).collect();
    // Noise large enough to dominate rounding, small enough to stay linear.
    let imu_noise = ImuNoise {
        sigma_a: 0.02,
        sigma_w: 5e-3,
        sigma_ba: 2e-3,
        sigma_bw: 5e-4,
    };
    let leg_noise = LegNoise {
        sigma_phi: 1e-2,
        sigma_dphi: 5e-2,
        sigma_v_contact: 2e-3,
        sigma_v_nocontact: 1.0,
        sigma_rho_contact: 2e-2,
        sigma_rho_nocontact: 1.0,
    };
    let z = Vector3::zeros();
    let (pre, leg) = preintegrate(&data, z, z, 0.21, &imu_noise, &leg_noise)?;
    let g = geom();
    let (a0, b0, r0) = integrate_imu(&imu);
    let eps0 = integrate_leg(&g, &imu, &legs, &vec![0.21; imu.len()]);

    let mut imu_acc = DMatrix::<f64>::zeros(15, 15);
    let mut leg_acc = DMatrix::<f64>::zeros(4, 4);
    let (mut nimu, mut nlegs) = (imu.clone(), legs.clone());
    let mut rho = vec![0.21; imu.len()];
    let start = Instant::now();
    for _ in 0..o.draws {
        let (mut ba, mut bw, mut vel) = (z, z, z);
        for i in 0..imu.len() {
            if i > 0 {
                ba += gauss3(rng) * (imu_noise.sigma_ba * DT.sqrt());
                bw += gauss3(rng) * (imu_noise.sigma_bw * DT.sqrt());
                rho[i] = rho[i - 1] + leg_noise.sigma_rho_contact * DT.sqrt() * gauss(rng);
                vel += gauss3(rng) * (leg_noise.sigma_v_contact * DT);
            }
            nimu[i].accel = imu[i].accel + ba + gauss3(rng) * (imu_noise.sigma_a / DT.sqrt());
            nimu[i].gyro = imu[i].gyro + bw + gauss3(rng) * (imu_noise.sigma_w / DT.sqrt());
            nlegs[i].gyro = nimu[i].gyro;
            let (dp, dd) = (gauss3(rng) * leg_noise.sigma_phi, gauss3(rng) * leg_noise.sigma_dphi);
            for k in 0..3 {
                nlegs[i].joint.phi[k] = legs[i].joint.phi[k] + dp[k];
                nlegs[i].joint.dphi[k] = legs[i].joint.dphi[k] + dd[k];
            }
        }
        let (a, b, r) = integrate_imu(&nimu);
        let dth = nalgebra::Rotation3::from_matrix_unchecked(r0.transpose() * r).scaled_axis();
        let e = stack(&[
            (a - a0).as_slice(),
            (b - b0).as_slice(),
            dth.as_slice(),
            ba.as_slice(),
            bw.as_slice(),
        ]);
        imu_acc += &e * e.transpose();
        let de = integrate_leg(&g, &nimu, &nlegs, &rho) + vel - eps0;
        let e = stack(&[de.as_slice(), &[rho[rho.len() - 1] - rho[0]]]);
        leg_acc += &e * e.transpose();
    }
    let secs = start.elapsed().as_secs_f64();
    let n = o.draws as f64;
    let imu_model = DMatrix::from_column_slice(15, 15, pre.cov.as_slice());
    let leg_model = DMatrix::from_column_slice(4, 4, leg.eps_rho_covariance().as_slice());
    Ok(vec![
        CheckResult {
            name: "imu preintegration covariance (trace)",
            cases: o.draws,
            worst: trace_error(&(imu_acc / n), &imu_model),
            tolerance: COVARIANCE_TOL,
            seconds: secs,
        },
        CheckResult {
            name: "leg preintegration covariance (trace)",
            cases: o.draws,
            worst: trace_error(&(leg_acc / n), &leg_model),
            tolerance: COVARIANCE_TOL,
            seconds: secs,
        },
    ])
}

pub fn run_all(o: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = derivative_checks(o)?;
    out.extend(covariance_checks(o)?);
    Ok(out)
}
