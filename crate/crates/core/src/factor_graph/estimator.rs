//! Full pipeline over a dataset: contact filter at the sensor rate, one
//! keyframe per camera frame, a window solve after each keyframe.

use std::time::Instant;

use log::warn;
use nalgebra::Vector3;

use super::window::{Feature, Interval, SlidingWindow, WindowParams};
use super::{EstimatorConfig, EstimatorMode};
use crate::contact_filter::{ContactFilter, FilterState};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::kinematics::{KinParams, NUM_LEGS};
use crate::leg_preint::LegReading;
use crate::so3::UnitQuaternion;
use crate::state::RobotState;

/// Keyframe rate used when a dataset has no camera stream.
const FALLBACK_KEYFRAME_RATE: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub state: RobotState,
}

#[derive(Debug, Clone)]
pub struct EstimatorOutput {
    pub mode: EstimatorMode,
    /// Newest estimate after each keyframe.
    pub trajectory: Vec<TrajectoryPoint>,
    /// Dataset sample index of the first keyframe.
    pub first_sample: usize,
    /// Contact flags fed to the estimator at every sample from
    /// `first_sample` on.
    pub contact: Vec<[bool; NUM_LEGS]>,
    /// Wall-clock solve time per keyframe, milliseconds.
    pub solve_ms: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// IMU sample index of every keyframe.
fn keyframe_indices(d: &Dataset) -> Result<Vec<usize>> {
    if d.cam.is_empty() {
        let step = (d.header.imu_rate / FALLBACK_KEYFRAME_RATE).round().max(1.0) as usize;
        return Ok((0..d.imu.len()).step_by(step).collect());
    }
    let tol = 0.5 / d.header.imu_rate + 1e-9;
    let mut out: Vec<usize> = Vec::with_capacity(d.cam.len());
    for f in &d.cam {
        let i = d.imu.partition_point(|s| s.t < f.t);
        let best = [i.saturating_sub(1), i.min(d.imu.len() - 1)]
            .into_iter()
            .min_by(|a, b| (d.imu[*a].t - f.t).abs().total_cmp(&(d.imu[*b].t - f.t).abs()))
            .expect("two candidates");
        if (d.imu[best].t - f.t).abs() > tol {
            return Err(Error::Config(format!("camera frame at t = {} has no IMU sample", f.t)));
        }
        if out.last().is_some_and(|&l| l >= best) {
            return Err(Error::Config(format!("two camera frames share the IMU sample at t = {}", d.imu[best].t)));
        }
        out.push(best);
    }
    Ok(out)
}

fn initial_state(d: &Dataset, t: f64, rho: [KinParams; NUM_LEGS]) -> RobotState {
    let (p, q, v) = match d.gt.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs())) {
        Some(g) => (g.p, g.q, g.v),
        None => {
            warn!("no ground truth; starting at rest at the origin");
            (Vector3::zeros(), UnitQuaternion::identity(), Vector3::zeros())
        }
    };
    RobotState {
        p,
        q,
        v,
        ba: Vector3::zeros(),
        bw: Vector3::zeros(),
        rho,
    }
}

/// Runs one estimator mode over a dataset.
pub fn run_estimator(d: &Dataset, mode: EstimatorMode, cfg: &EstimatorConfig) -> Result<EstimatorOutput> {
    cfg.validate()?;
    if d.imu.is_empty() {
        return Err(Error::MissingStream("imu"));
    }
    if d.leg.len() != d.imu.len() {
        return Err(Error::Config(format!(
            "{} leg records for {} IMU samples",
            d.leg.len(),
            d.imu.len()
        )));
    }
    if mode.uses_vision() && d.cam.is_empty() {
        return Err(Error::NoVisionStream(format!("mode {mode} needs camera records")));
    }
    let kf_idx = keyframe_indices(d)?;
    let geoms = d.header.geometry;
    let rho = std::array::from_fn(|l| KinParams::new(cfg.calf_init.unwrap_or(geoms[l].calf_length_nominal)));
    let i0 = kf_idx[0];
    let init = initial_state(d, d.imu[i0].t, rho);
    let g_w = Vector3::new(0.0, 0.0, d.header.gravity);

    let mut filter = ContactFilter::new(
        FilterState::new(init.p, init.v, init.q, cfg.contact.initial_covariance()),
        cfg.contact,
        cfg.imu_noise,
        geoms,
        rho,
        g_w,
    );
    filter.reject_outliers = cfg.reject_outliers;
    let params = WindowParams {
        mode,
        geoms,
        imu_noise: cfg.imu_noise,
        leg_noise: cfg.leg_noise,
        camera: d.header.camera,
        solver: cfg.solver,
        gravity_w: g_w,
    };

    let mut out = EstimatorOutput {
        mode,
        trajectory: Vec::with_capacity(kf_idx.len()),
        first_sample: i0,
        contact: Vec::with_capacity(d.imu.len() - i0),
        solve_ms: Vec::new(),
        iterations: Vec::new(),
    };
    let mut window: Option<SlidingWindow> = None;
    let mut interval: Option<Interval> = None;
    let mut next_kf = 0;
    let mut readings: Vec<LegReading> = Vec::with_capacity(NUM_LEGS);
    for i in i0..d.imu.len() {
        let (imu, leg) = (&d.imu[i], &d.leg[i]);
        let flags = if mode == EstimatorMode::Vio {
            leg.contact
        } else {
            filter.step(imu, leg)?
        };
        out.contact.push(flags);
        readings.clear();
        if mode.uses_legs() {
            readings.extend((0..NUM_LEGS).map(|l| leg.reading(l, Some(flags[l]))));
        }
        if let Some(iv) = interval.as_mut() {
            iv.push(imu, &readings, &geoms, &cfg.imu_noise, &cfg.leg_noise)?;
        }
        if kf_idx.get(next_kf) != Some(&i) {
            continue;
        }
        let t = imu.t;
        if mode == EstimatorMode::Kf {
            let s = &filter.state;
            out.trajectory.push(TrajectoryPoint {
                t,
                state: RobotState {
                    p: s.p,
                    q: s.q,
                    v: s.v,
                    ba: s.ba,
                    bw: s.bw,
                    rho: filter.rho,
                },
            });
            next_kf += 1;
            continue;
        }
        let obs = d.cam[next_kf].obs.iter().map(Feature::from).collect();
        let w = match window.as_mut() {
            None => window.insert(SlidingWindow::new(params.clone(), t, init, obs, &cfg.prior)),
            Some(w) => {
                let iv = interval.take().expect("an interval is open after the first keyframe");
                w.add_keyframe(t, iv, obs)?;
                let start = Instant::now();
                let rep = w.solve()?;
                out.solve_ms.push(start.elapsed().as_secs_f64() * 1e3);
                out.iterations.push(rep.iterations);
                w
            }
        };
        let x = w.newest().state;
        out.trajectory.push(TrajectoryPoint { t, state: x });
        if mode.calibrates() {
            filter.rho = x.rho.map(KinParams::clamped);
        }
        interval = Some(Interval::new(imu, &readings, &x, &geoms));
        next_kf += 1;
    }
    Ok(out)
}
