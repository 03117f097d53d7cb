//! Deterministic synthetic trot datasets: body trajectory, feet, joints,
//! IMU, joint encoders, contact flags, slips and landmark observations.

pub mod gait;
pub mod path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::harness::dataset::{CamFrame, Dataset, GtRecord, Header, Observation, SCHEMA_VERSION};
use crate::imu_preint::{ImuNoise, ImuSample};
use crate::kinematics::{JointState, KinParams, LegGeometry, NUM_LEGS};
use crate::leg_preint::LegSample;
use crate::so3::UnitQuaternion;
use crate::state::GRAVITY;

pub use gait::{gait_schedule, inverse_kinematics, GaitConfig, SlipEvent};
pub use path::{BodyState, Path, PathSpec, Trajectory};

/// Independent random streams so that changing one noise source leaves the
/// others untouched.
mod stream {
    pub const BIAS: u64 = 1;
    pub const SLIP: u64 = 2;
    pub const LANDMARKS: u64 = 3;
    pub const IMU: u64 = 4;
    pub const JOINTS: u64 = 5;
    pub const CAMERA: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlipConfig {
    /// Number of randomly placed slips, in addition to `events`.
    pub count: usize,
    pub speed: f64,
    pub duration: f64,
    pub events: Vec<SlipEvent>,
}

impl Default for SlipConfig {
    fn default() -> Self {
        SlipConfig {
            count: 0,
            speed: 0.3,
            duration: 0.1,
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkConfig {
    /// Landmarks per metre of path.
    pub per_meter: f64,
    /// Distance band either side of the path centreline.
    pub lateral_min: f64,
    pub lateral_max: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        LandmarkConfig {
            per_meter: 12.0,
            lateral_min: 1.0,
            lateral_max: 4.0,
            height_min: -0.2,
            height_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    /// When set, replaces `duration` and trims `speed` so that the run ends
    /// back at the start after this many loops.
    pub laps: Option<f64>,
    pub speed: f64,
    /// Speed ramp from rest at the start, seconds.
    pub ramp: f64,
    pub height: f64,
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
    /// Forward speed oscillation at twice the gait frequency, as a fraction
    /// of `speed`. Zero mean, so `speed` stays the average.
    pub speed_ripple: f64,
    pub path: PathSpec,
    pub gait: GaitConfig,
    pub imu_rate: f64,
    pub leg_rate: f64,
    pub cam_rate: f64,
    pub imu_noise: ImuNoise,
    pub sigma_phi: f64,
    pub sigma_dphi: f64,
    pub pixel_sigma: f64,
    /// Initial true biases; they then follow the configured random walks.
    pub bias_a: [f64; 3],
    pub bias_w: [f64; 3],
    pub calf_true: [f64; NUM_LEGS],
    pub calf_nominal: f64,
    pub slip: SlipConfig,
    pub landmarks: LandmarkConfig,
    pub camera: CameraModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            duration: 60.0,
            laps: None,
            speed: 0.5,
            ramp: 1.0,
            height: 0.3,
            pitch_amplitude: 0.0,
            pitch_frequency: 0.5,
            speed_ripple: 0.1,
            path: PathSpec::default(),
            gait: GaitConfig::default(),
            imu_rate: 500.0,
            leg_rate: 500.0,
            cam_rate: 15.0,
            imu_noise: ImuNoise::default(),
            sigma_phi: 1e-3,
            sigma_dphi: 1e-2,
            pixel_sigma: 1.0,
            bias_a: [0.02, -0.015, 0.01],
            bias_w: [1e-3, -1.5e-3, 8e-4],
            calf_true: [0.23; NUM_LEGS],
            calf_nominal: 0.21,
            slip: SlipConfig::default(),
            landmarks: LandmarkConfig::default(),
            camera: CameraModel::default(),
        }
    }
}

impl SimConfig {
    /// Exact sensors: no noise, no biases, no slips.
    pub fn noiseless(mut self) -> Self {
        self.imu_noise = ImuNoise {
            sigma_a: 0.0,
            sigma_w: 0.0,
            sigma_ba: 0.0,
            sigma_bw: 0.0,
        };
        self.sigma_phi = 0.0;
        self.sigma_dphi = 0.0;
        self.pixel_sigma = 0.0;
        self.bias_a = [0.0; 3];
        self.bias_w = [0.0; 3];
        self.slip = SlipConfig::default();
        self
    }

    /// Sets duration and speed so that the last IMU tick lands exactly back
    /// at the start after `laps` loops. The duration is rounded up to whole
    /// IMU ticks and the speed lowered to match.
    pub fn close_loop(mut self, laps: f64) -> Result<Self> {
        if !(self.speed > 0.0) || !(laps > 0.0) {
            return Err(Error::Config("a closed loop needs positive speed and laps".into()));
        }
        let dist = laps * Path::new(self.path)?.length();
        let ramp = self.ramp.max(0.0);
        let exact = dist / self.speed + 0.5 * ramp;
        self.duration = (exact * self.imu_rate - 1e-9).ceil() / self.imu_rate;
        self.speed = dist / (self.duration - 0.5 * ramp);
        self.laps = None;
        Ok(self)
    }

    /// The configuration actually simulated, with `laps` applied.
    pub fn resolved(&self) -> Result<SimConfig> {
        match self.laps {
            Some(l) => self.clone().close_loop(l),
            None => Ok(self.clone()),
        }
    }

    pub fn geometry(&self) -> [LegGeometry; NUM_LEGS] {
        LegGeometry::a1_like(self.calf_nominal)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.imu_rate, self.leg_rate, self.cam_rate];
        if !rates.iter().all(|r| *r > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.leg_rate != self.imu_rate {
            return Err(Error::Config("leg_rate must equal imu_rate (shared clock)".into()));
        }
        if self.cam_rate > self.imu_rate {
            return Err(Error::Config("cam_rate cannot exceed imu_rate".into()));
        }
        if !(self.speed >= 0.0) || !(self.duration > 0.0) || self.ramp < 0.0 {
            return Err(Error::Config("need speed >= 0, duration > 0 and ramp >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.speed_ripple) {
            return Err(Error::Config("speed_ripple must lie in [0, 1)".into()));
        }
        if self.ramp > self.duration {
            return Err(Error::Config("duration shorter than the speed ramp".into()));
        }
        let sig = [
            self.imu_noise.sigma_a,
            self.imu_noise.sigma_w,
            self.imu_noise.sigma_ba,
            self.imu_noise.sigma_bw,
            self.sigma_phi,
            self.sigma_dphi,
            self.pixel_sigma,
        ];
        if !sig.iter().all(|s| *s >= 0.0) {
            return Err(Error::Config("noise values must be non-negative".into()));
        }
        if self.calf_true.iter().any(|l| !(0.05..=0.5).contains(l)) {
            return Err(Error::Config("calf lengths must lie in [0.05, 0.5] m".into()));
        }
        let lm = &self.landmarks;
        if lm.per_meter < 0.0 || lm.lateral_min > lm.lateral_max || lm.height_min > lm.height_max {
            return Err(Error::Config("invalid landmark band".into()));
        }
        self.gait.validate()
    }
}

/// True state of the world at every IMU tick.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub times: Vec<f64>,
    pub body: Vec<BodyState>,
    pub joints: Vec<[JointState; NUM_LEGS]>,
    pub contact: Vec<[bool; NUM_LEGS]>,
    pub slip: Vec<[bool; NUM_LEGS]>,
    pub bias_a: Vec<Vector3<f64>>,
    pub bias_w: Vec<Vector3<f64>>,
    pub calf: [f64; NUM_LEGS],
    pub slips: Vec<SlipEvent>,
    pub landmarks: Vec<Vector3<f64>>,
    pub path_length: f64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

pub fn generate_trajectory(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    Ok(Trajectory {
        path: Path::new(cfg.path)?,
        speed: cfg.speed,
        ramp: cfg.ramp,
        duration: cfg.duration,
        height: cfg.height,
        pitch_amplitude: cfg.pitch_amplitude,
        pitch_frequency: cfg.pitch_frequency,
        ripple: cfg.speed_ripple * cfg.speed,
        ripple_frequency: 2.0 * cfg.gait.frequency,
    })
}

fn random_slips(cfg: &SimConfig) -> Vec<SlipEvent> {
    let mut events = cfg.slip.events.clone();
    if cfg.slip.count == 0 {
        return events;
    }
    let mut rng = rng_for(cfg.seed, stream::SLIP);
    let stance = cfg.gait.stance_duration();
    let margin = 0.03;
    let room = stance - cfg.slip.duration - 2.0 * margin;
    let (t_lo, t_hi) = (2.0_f64.min(cfg.duration), cfg.duration - 1.0);
    let mut used = Vec::new();
    let mut attempts = 0;
    while used.len() < cfg.slip.count && room > 0.0 && attempts < 10_000 {
        attempts += 1;
        let leg = rng.random_range(0..NUM_LEGS);
        let t = rng.random_range(t_lo..t_hi.max(t_lo + 1e-9));
        let n = (t * cfg.gait.frequency + gait::TROT_OFFSETS[leg]).floor() as i64;
        let t0 = cfg.gait.stance_start(leg, n);
        if t0 < t_lo || t0 + stance > t_hi || used.contains(&(leg, n)) {
            continue;
        }
        used.push((leg, n));
        let start = t0 + margin + rng.random_range(0.0..room);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        events.push(SlipEvent {
            leg,
            t_start: start,
            t_end: start + cfg.slip.duration,
            velocity: [cfg.slip.speed * dir.cos(), cfg.slip.speed * dir.sin(), 0.0],
        });
    }
    events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    events
}

fn landmarks(cfg: &SimConfig, path: &Path) -> Vec<Vector3<f64>> {
    let lm = &cfg.landmarks;
    let n = (lm.per_meter * path.length()).round() as usize;
    let mut rng = rng_for(cfg.seed, stream::LANDMARKS);
    (0..n)
        .map(|_| {
            let s = rng.random_range(0.0..path.length());
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let off = rng.random_range(lm.lateral_min..=lm.lateral_max);
            let h = rng.random_range(lm.height_min..=lm.height_max);
            let (xy, yaw, _) = path.evaluate(s);
            let normal = Vector2::new(-yaw.sin(), yaw.cos());
            let p = xy + normal * side * off;
            Vector3::new(p.x, p.y, h)
        })
        .collect()
}

pub fn generate_ground_truth(cfg: &SimConfig) -> Result<GroundTruth> {
    let cfg = &cfg.resolved()?;
    let traj = generate_trajectory(cfg)?;
    let geoms = cfg.geometry();
    let slips = random_slips(cfg);
    let planner = gait::FootPlanner {
        traj: &traj,
        gait: cfg.gait,
        geoms,
        slips: slips.clone(),
    };
    let n = (cfg.duration * cfg.imu_rate + 1e-9).floor() as usize + 1;
    let dt = 1.0 / cfg.imu_rate;
    let mut bias_rng = rng_for(cfg.seed, stream::BIAS);
    let mut ba = Vector3::from(cfg.bias_a);
    let mut bw = Vector3::from(cfg.bias_w);

    let mut gt = GroundTruth {
        times: Vec::with_capacity(n),
        body: Vec::with_capacity(n),
        joints: Vec::with_capacity(n),
        contact: Vec::with_capacity(n),
        slip: Vec::with_capacity(n),
        bias_a: Vec::with_capacity(n),
        bias_w: Vec::with_capacity(n),
        calf: cfg.calf_true,
        slips,
        landmarks: landmarks(cfg, &traj.path),
        path_length: 0.0,
    };
    for i in 0..n {
        let t = i as f64 / cfg.imu_rate;
        if i > 0 {
            ba += gauss3(&mut bias_rng) * (cfg.imu_noise.sigma_ba * dt.sqrt());
            bw += gauss3(&mut bias_rng) * (cfg.imu_noise.sigma_bw * dt.sqrt());
        }
        let b = traj.body(t);
        let rot = b.q.rotation_matrix();
        let mut joints = [JointState::default(); NUM_LEGS];
        let mut contact = [false; NUM_LEGS];
        let mut slip = [false; NUM_LEGS];
        for leg in 0..NUM_LEGS {
            let f = planner.foot(leg, t);
            let rho = KinParams::new(cfg.calf_true[leg]);
            let fb = rot.transpose() * (f.pos - b.p);
            let dfb = rot.transpose() * (f.vel - b.v) - b.omega.cross(&fb);
            let phi = inverse_kinematics(&geoms[leg], &fb, &rho)
                .map_err(|e| Error::Unreachable(format!("leg {leg} at t = {t}: {e}")))?;
            let dphi = gait::joint_rates(&geoms[leg], &phi, &rho, &dfb)?;
            joints[leg] = JointState {
                phi: phi.into(),
                dphi: dphi.into(),
            };
            contact[leg] = f.stance;
            slip[leg] = f.slipping;
        }
        if let Some(prev) = gt.body.last() {
            gt.path_length += (b.p - prev.p).norm();
        }
        gt.times.push(t);
        gt.body.push(b);
        gt.joints.push(joints);
        gt.contact.push(contact);
        gt.slip.push(slip);
        gt.bias_a.push(ba);
        gt.bias_w.push(bw);
    }
    Ok(gt)
}

/// Noiseless normalized observations of every landmark in view.
pub fn project_landmarks(
    p: &Vector3<f64>,
    q: &UnitQuaternion,
    landmarks: &[Vector3<f64>],
    camera: &CameraModel,
) -> Vec<Observation> {
    let right = camera.right();
    landmarks
        .iter()
        .enumerate()
        .filter_map(|(id, l)| {
            let n = camera.project(&camera.to_camera(p, q, l))?;
            let uv_right = right.and_then(|r| {
                let m = r.project(&r.to_camera(p, q, l))?;
                r.in_view(&m).then_some([m.x, m.y])
            });
            camera.in_view(&n).then_some(Observation {
                id: id as u32,
                uv: [n.x, n.y],
                uv_right,
            })
        })
        .collect()
}

pub fn synthesize_sensors(truth: &GroundTruth, cfg: &SimConfig) -> Result<Dataset> {
    let cfg = &cfg.resolved()?;
    let g_w = Vector3::new(0.0, 0.0, GRAVITY);
    let dt = 1.0 / cfg.imu_rate;
    let mut imu_rng = rng_for(cfg.seed, stream::IMU);
    let mut joint_rng = rng_for(cfg.seed, stream::JOINTS);
    let mut cam_rng = rng_for(cfg.seed, stream::CAMERA);
    let n = truth.times.len();
    let (sa, sw) = (
        cfg.imu_noise.sigma_a / dt.sqrt(),
        cfg.imu_noise.sigma_w / dt.sqrt(),
    );

    let mut imu = Vec::with_capacity(n);
    let mut leg = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let t = truth.times[i];
        let b = &truth.body[i];
        let accel = b.q.inverse_rotate(&(b.a + g_w)) + truth.bias_a[i] + gauss3(&mut imu_rng) * sa;
        let gyro = b.omega + truth.bias_w[i] + gauss3(&mut imu_rng) * sw;
        imu.push(ImuSample { t, accel, gyro });
        let joints = truth.joints[i].map(|j| {
            let mut out = j;
            for k in 0..3 {
                out.phi[k] += cfg.sigma_phi * gauss(&mut joint_rng);
                out.dphi[k] += cfg.sigma_dphi * gauss(&mut joint_rng);
            }
            out
        });
        leg.push(LegSample {
            t,
            joints,
            contact: truth.contact[i],
            gyro,
        });
        gt.push(GtRecord {
            t,
            p: b.p,
            q: b.q,
            v: b.v,
            ba: truth.bias_a[i],
            bw: truth.bias_w[i],
            rho: truth.calf,
            contact: truth.contact[i],
            slip: truth.slip[i],
        });
    }

    let sigma_n = cfg.camera.normalized_sigma(cfg.pixel_sigma);
    let mut cam = Vec::new();
    for j in 0.. {
        let tj = j as f64 / cfg.cam_rate;
        if tj > cfg.duration + 1e-9 {
            break;
        }
        let idx = (tj * cfg.imu_rate).round() as usize;
        if idx >= n {
            break;
        }
        let b = &truth.body[idx];
        let mut obs = project_landmarks(&b.p, &b.q, &truth.landmarks, &cfg.camera);
        for o in &mut obs {
            o.uv[0] += sigma_n * gauss(&mut cam_rng);
            o.uv[1] += sigma_n * gauss(&mut cam_rng);
            if let Some(r) = o.uv_right.as_mut() {
                r[0] += sigma_n * gauss(&mut cam_rng);
                r[1] += sigma_n * gauss(&mut cam_rng);
            }
        }
        cam.push(CamFrame {
            t: truth.times[idx],
            obs,
        });
    }

    Ok(Dataset {
        header: Header {
            schema_version: SCHEMA_VERSION,
            imu_rate: cfg.imu_rate,
            leg_rate: cfg.leg_rate,
            cam_rate: cfg.cam_rate,
            gravity: GRAVITY,
            geometry: cfg.geometry(),
            camera: cfg.camera,
            pixel_sigma: cfg.pixel_sigma,
        },
        imu,
        leg,
        cam,
        gt,
    })
}

/// Ground truth and the dataset synthesized from it.
pub fn simulate(cfg: &SimConfig) -> Result<(GroundTruth, Dataset)> {
    let truth = generate_ground_truth(cfg)?;
    let data = synthesize_sensors(&truth, cfg)?;
    Ok((truth, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, lo_velocity_world};

    fn short(cfg: SimConfig) -> SimConfig {
        SimConfig {
            duration: 6.0,
            ..cfg
        }
    }

    #[test]
    fn stationary_noiseless_imu_reads_gravity() {
        let cfg = short(SimConfig {
            speed: 0.0,
            ..SimConfig::default()
        })
        .noiseless();
        let (_, d) = simulate(&cfg).unwrap();
        for s in &d.imu {
            assert!((s.accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
            assert!(s.gyro.norm() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = short(SimConfig {
            slip: SlipConfig {
                count: 2,
                ..SlipConfig::default()
            },
            ..SimConfig::default()
        });
        let (_, a) = simulate(&cfg).unwrap();
        let (_, b) = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let (_, c) = simulate(&SimConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn injected_noise_has_configured_spread() {
        let cfg = SimConfig {
            duration: 200.0,
            speed: 0.0,
            bias_a: [0.0; 3],
            bias_w: [0.0; 3],
            imu_noise: ImuNoise {
                sigma_ba: 0.0,
                sigma_bw: 0.0,
                ..ImuNoise::default()
            },
            landmarks: LandmarkConfig {
                per_meter: 0.0,
                ..LandmarkConfig::default()
            },
            ..SimConfig::default()
        };
        let (_, d) = simulate(&cfg).unwrap();
        assert!(d.imu.len() >= 100_000);
        let std = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let dt = 1.0 / cfg.imu_rate;
        let ax: Vec<f64> = d.imu.iter().map(|s| s.accel.x).collect();
        let wz: Vec<f64> = d.imu.iter().map(|s| s.gyro.z).collect();
        let expect_a = cfg.imu_noise.sigma_a / dt.sqrt();
        let expect_w = cfg.imu_noise.sigma_w / dt.sqrt();
        assert!((std(&ax) / expect_a - 1.0).abs() < 0.03);
        assert!((std(&wz) / expect_w - 1.0).abs() < 0.03);
    }

    #[test]
    fn stance_feet_are_fixed_and_lo_is_exact() {
        let cfg = short(SimConfig {
            pitch_amplitude: 0.05,
            ..SimConfig::default()
        });
        let truth = generate_ground_truth(&cfg).unwrap();
        let geoms = cfg.geometry();
        for leg in 0..NUM_LEGS {
            let rho = KinParams::new(cfg.calf_true[leg]);
            let mut anchor: Option<Vector3<f64>> = None;
            for i in 0..truth.times.len() {
                let b = &truth.body[i];
                let j = &truth.joints[i][leg];
                let foot = b.p + b.q.rotate(&forward_kinematics(&geoms[leg], &j.angles(), &rho));
                if truth.contact[i][leg] && !truth.slip[i][leg] {
                    match anchor {
                        Some(a) if (foot - a).norm() < 0.01 => assert!((foot - a).norm() < 1e-9),
                        _ => anchor = Some(foot),
                    }
                    let v = lo_velocity_world(&b.q, &geoms[leg], &j.angles(), &j.rates(), &rho, &b.omega);
                    assert!((v - b.v).norm() < 1e-8, "leg {leg} t {}", truth.times[i]);
                } else {
                    anchor = None;
                }
            }
        }
    }

    #[test]
    fn slips_are_placed_in_stance() {
        let cfg = SimConfig {
            duration: 30.0,
            slip: SlipConfig {
                count: 5,
                ..SlipConfig::default()
            },
            ..SimConfig::default()
        };
        let truth = generate_ground_truth(&cfg).unwrap();
        assert_eq!(truth.slips.len(), 5);
        let labelled: usize = truth.slip.iter().map(|s| s.iter().filter(|x| **x).count()).sum();
        assert!(labelled >= 5 * 49);
        for (c, s) in truth.contact.iter().zip(&truth.slip) {
            for k in 0..NUM_LEGS {
                assert!(!s[k] || c[k]);
            }
        }
    }

    #[test]
    fn camera_frames_at_rate() {
        let cfg = short(SimConfig::default());
        let (_, d) = simulate(&cfg).unwrap();
        assert_eq!(d.cam.len(), 91);
        assert!(d.cam.iter().all(|c| !c.obs.is_empty()));
        let mean = d.cam.iter().map(|c| c.obs.len()).sum::<usize>() / d.cam.len();
        assert!(mean >= 20, "mean observations {mean}");
    }

    #[test]
    fn closed_loop_returns_home() {
        let cfg = SimConfig {
            path: PathSpec::Circle { radius: 1.5 },
            ..SimConfig::default()
        }
        .noiseless()
        .close_loop(1.0)
        .unwrap();
        assert!((cfg.speed - 0.5).abs() < 1e-3);
        let truth = generate_ground_truth(&cfg).unwrap();
        let (a, b) = (truth.body.first().unwrap(), truth.body.last().unwrap());
        assert!((b.p - a.p).norm() < 1e-9);
    }

    #[test]
    fn laps_close_the_loop() {
        let cfg = SimConfig {
            laps: Some(1.0),
            ..SimConfig::default()
        };
        let r = cfg.resolved().unwrap();
        assert_eq!(r.laps, None);
        assert_eq!(r.resolved().unwrap(), r);
        assert!(r.duration > 100.0 && (r.speed - 0.5).abs() < 1e-3);
        let truth = generate_ground_truth(&cfg).unwrap();
        assert!(truth.path_length >= 50.0, "{}", truth.path_length);
        let (a, b) = (truth.body.first().unwrap(), truth.body.last().unwrap());
        assert!((b.p - a.p).norm() < 1e-9);
    }
}
