//! Keyframe window, factor evaluation, damped Gauss-Newton and
//! marginalization of the oldest keyframe.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use super::vision::{huber_cost, huber_sqrt_weight, vision_residual, MIN_DEPTH};
use super::{EstimatorMode, PriorSigmas, SolverConfig};
use crate::camera::{max_parallax, triangulate, Bearing, CameraModel};
use crate::error::{Error, Result};
use crate::harness::dataset::Observation;
use crate::imu_preint::{ImuNoise, ImuPreintegration, ImuSample};
use crate::kinematics::{LegGeometry, NUM_LEGS};
use crate::leg_preint::{LegNoise, LegPreintegration, LegReading};
use crate::so3::{embed_matrix, inv_cayley_jacobian};
use crate::state::RobotState;

// Error-state layout of one keyframe.
const P: usize = 0;
const TH: usize = 3;
const V: usize = 6;
const BA: usize = 9;
const BW: usize = 12;
const RHO: usize = 15;

/// Error-state dimension of one keyframe; calf lengths only when calibrating.
pub fn state_dim(mode: EstimatorMode) -> usize {
    if mode.calibrates() {
        RHO + NUM_LEGS
    } else {
        RHO
    }
}

/// `x ⊞ δ` over the first `delta.len()` error-state components.
pub fn retract(x: &RobotState, delta: &[f64]) -> RobotState {
    let v3 = |o: usize| Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
    let mut y = *x;
    y.p += v3(P);
    y.q = x.q.boxplus(&v3(TH));
    y.v += v3(V);
    y.ba += v3(BA);
    y.bw += v3(BW);
    if delta.len() > RHO {
        for (l, rho) in y.rho.iter_mut().enumerate() {
            rho.calf_length += delta[RHO + l];
        }
    }
    y
}

/// `x ⊟ x0` and its Jacobian with respect to a retraction of `x`.
fn local(x: &RobotState, x0: &RobotState, dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut d = DVector::zeros(dim);
    d.fixed_rows_mut::<3>(P).copy_from(&(x.p - x0.p));
    d.fixed_rows_mut::<3>(TH).copy_from(&x0.q.boxminus(&x.q)?);
    d.fixed_rows_mut::<3>(V).copy_from(&(x.v - x0.v));
    d.fixed_rows_mut::<3>(BA).copy_from(&(x.ba - x0.ba));
    d.fixed_rows_mut::<3>(BW).copy_from(&(x.bw - x0.bw));
    for l in 0..dim.saturating_sub(RHO) {
        d[RHO + l] = x.rho[l].calf_length - x0.rho[l].calf_length;
    }
    let mut j = DMatrix::identity(dim, dim);
    let e = x0.q.inverse().product(&x.q);
    let blk = 2.0 * inv_cayley_jacobian(&e.as_vector4()) * e.left_matrix() * (0.5 * embed_matrix());
    j.fixed_view_mut::<3, 3>(TH, TH).copy_from(&blk);
    Ok((d, j))
}

fn propagate(x: &RobotState, imu: &ImuPreintegration, g_w: &Vector3<f64>) -> RobotState {
    let c = imu.corrected(&(x.ba - imu.lin_ba), &(x.bw - imu.lin_bw));
    let t = imu.dt_total;
    let r = x.q.rotation_matrix();
    RobotState {
        p: x.p + x.v * t - 0.5 * g_w * t * t + r * c.alpha,
        q: x.q.product(&c.gamma),
        v: x.v - g_w * t + r * c.beta,
        ..*x
    }
}

#[derive(Debug, Clone)]
pub struct WindowParams {
    pub mode: EstimatorMode,
    pub geoms: [LegGeometry; NUM_LEGS],
    pub imu_noise: ImuNoise,
    pub leg_noise: LegNoise,
    pub camera: CameraModel,
    pub solver: SolverConfig,
    pub gravity_w: Vector3<f64>,
}

/// One landmark seen in a keyframe, in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub id: u32,
    pub uv: Vector2<f64>,
    /// Second camera of a stereo pair.
    pub uv_right: Option<Vector2<f64>>,
}

impl From<&Observation> for Feature {
    fn from(o: &Observation) -> Self {
        Feature {
            id: o.id,
            uv: Vector2::new(o.uv[0], o.uv[1]),
            uv_right: o.uv_right.map(|r| Vector2::new(r[0], r[1])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub t: f64,
    pub state: RobotState,
    pub obs: Vec<Feature>,
}

/// IMU and per-leg preintegrations between two adjacent keyframes.
#[derive(Debug, Clone)]
pub struct Interval {
    pub imu: ImuPreintegration,
    /// One per leg, or empty when legs are unused.
    pub legs: Vec<LegPreintegration>,
}

impl Interval {
    /// Starts at a keyframe sample, linearized at that keyframe's state.
    pub fn new(
        first: &ImuSample,
        legs: &[LegReading],
        x: &RobotState,
        geoms: &[LegGeometry; NUM_LEGS],
    ) -> Self {
        Interval {
            imu: ImuPreintegration::new(*first, x.ba, x.bw),
            legs: legs
                .iter()
                .enumerate()
                .map(|(i, r)| LegPreintegration::new(i, *r, &geoms[i], x.rho[i], x.bw))
                .collect(),
        }
    }

    pub fn push(
        &mut self,
        s: &ImuSample,
        legs: &[LegReading],
        geoms: &[LegGeometry; NUM_LEGS],
        imu_noise: &ImuNoise,
        leg_noise: &LegNoise,
    ) -> Result<()> {
        if legs.len() != self.legs.len() {
            return Err(Error::Config(format!(
                "interval tracks {} legs, got {} readings",
                self.legs.len(),
                legs.len()
            )));
        }
        let dt = s.t - self.imu.end_time();
        let step = self.imu.integrate_sample(s, dt, imu_noise)?;
        for (pre, r) in self.legs.iter_mut().zip(legs) {
            pre.integrate_leg_sample(r, &step, &geoms[pre.leg], leg_noise)?;
        }
        Ok(())
    }

    fn needs_reintegration(&self, x: &RobotState) -> bool {
        self.imu.needs_reintegration(&x.ba, &x.bw)
            || self.legs.iter().any(|l| l.needs_reintegration(&x.bw, &x.rho[l.leg]))
    }

    fn reintegrated(&self, x: &RobotState, params: &WindowParams) -> Result<Interval> {
        let (imu, steps) = self.imu.reintegrated_with_steps(x.ba, x.bw, &params.imu_noise)?;
        let legs = self
            .legs
            .iter()
            .map(|l| l.reintegrated(&steps, &params.geoms[l.leg], x.rho[l.leg], x.bw, &params.leg_noise))
            .collect::<Result<_>>()?;
        Ok(Interval { imu, legs })
    }
}

/// Gaussian prior over the oldest keyframes of the window and a set of
/// landmarks: `r = r0 + J [x ⊟ x0; l − l0]`.
#[derive(Debug, Clone)]
pub struct Prior {
    pub x0: Vec<RobotState>,
    pub landmarks: Vec<u32>,
    pub l0: Vec<Vector3<f64>>,
    pub sqrt_info: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl Prior {
    pub fn from_sigmas(x0: RobotState, s: &PriorSigmas, dim: usize) -> Prior {
        let mut w = DVector::zeros(dim);
        for (o, sig) in [(P, s.p), (TH, s.theta), (V, s.v), (BA, s.ba), (BW, s.bw)] {
            w.rows_mut(o, 3).fill(1.0 / sig);
        }
        w.rows_mut(RHO, dim - RHO).fill(1.0 / s.rho);
        Prior {
            x0: vec![x0],
            landmarks: Vec::new(),
            l0: Vec::new(),
            sqrt_info: DMatrix::from_diagonal(&w),
            r0: DVector::zeros(dim),
        }
    }

    /// Number of leading keyframes covered.
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn state_dim(&self) -> usize {
        (self.sqrt_info.ncols() - 3 * self.landmarks.len()) / self.x0.len()
    }

    /// Residual and, optionally, its Jacobian over the covered keyframes
    /// followed by the covered landmarks, in `self.landmarks` order.
    pub fn residual(
        &self,
        states: &[RobotState],
        lms: &[Vector3<f64>],
        with_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let (n, d) = (self.x0.len(), self.state_dim());
        let mut dx = DVector::zeros(self.sqrt_info.ncols());
        let mut blocks = Vec::with_capacity(n);
        for (i, (x, x0)) in states.iter().zip(&self.x0).enumerate() {
            let (di, ji) = local(x, x0, d)?;
            dx.rows_mut(i * d, d).copy_from(&di);
            blocks.push(ji.fixed_view::<3, 3>(TH, TH).into_owned());
        }
        for (i, (l, l0)) in lms.iter().zip(&self.l0).enumerate() {
            dx.fixed_rows_mut::<3>(n * d + 3 * i).copy_from(&(l - l0));
        }
        let r = &self.r0 + &self.sqrt_info * dx;
        if !with_jacobian {
            return Ok((r, None));
        }
        // The retraction Jacobian is the identity outside the rotation blocks.
        let mut j = self.sqrt_info.clone();
        for (i, b) in blocks.iter().enumerate() {
            let cols = self.sqrt_info.columns(i * d + TH, 3) * b;
            j.columns_mut(i * d + TH, 3).copy_from(&cols);
        }
        Ok((r, Some(j)))
    }

    /// Information matrix `JᵀJ`.
    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.tr_mul(&self.sqrt_info)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub landmarks: usize,
    pub observations: usize,
}

/// One image measurement: keyframe index, coordinates, which camera.
#[derive(Debug, Clone, Copy)]
struct View {
    kf: usize,
    uv: Vector2<f64>,
    right: bool,
}

/// Observations of one triangulated landmark that are usable in a solve.
struct Track {
    id: u32,
    obs: Vec<View>,
}

struct LmBlock {
    hll: Matrix3<f64>,
    gl: Vector3<f64>,
    /// Pose-landmark coupling, per observing keyframe.
    w: Vec<(usize, SMatrix<f64, 6, 3>)>,
}

/// Gauss-Newton normal equations `H δ = −g` with landmarks kept apart.
struct System {
    h: DMatrix<f64>,
    g: DVector<f64>,
    lms: Vec<LmBlock>,
}

impl System {
    fn new(n: usize, landmarks: usize) -> System {
        System {
            h: DMatrix::zeros(n, n),
            g: DVector::zeros(n),
            lms: (0..landmarks)
                .map(|_| LmBlock {
                    hll: Matrix3::zeros(),
                    gl: Vector3::zeros(),
                    w: Vec::new(),
                })
                .collect(),
        }
    }

    fn add(&mut self, r: &DVector<f64>, j: &DMatrix<f64>, cols: &[Option<usize>]) {
        let jtj = j.tr_mul(j);
        let jtr = j.tr_mul(r);
        for (a, ia) in cols.iter().enumerate() {
            let Some(ia) = *ia else { continue };
            self.g[ia] += jtr[a];
            for (b, ib) in cols.iter().enumerate() {
                if let Some(ib) = *ib {
                    self.h[(ia, ib)] += jtj[(a, b)];
                }
            }
        }
    }
}

fn whitener(cov: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Diverged(format!("{what} covariance is not positive definite")))?;
    Ok(chol.l().solve_lower_triangular(&DMatrix::identity(n, n)).expect("triangular factor is invertible"))
}

/// Inverse Cholesky factor of the IMU covariance reordered to the residual
/// rows `[p, θ, v, b_a, b_ω]`.
fn imu_whitener(imu: &ImuPreintegration) -> Result<DMatrix<f64>> {
    const PERM: [usize; 15] = [0, 1, 2, 6, 7, 8, 3, 4, 5, 9, 10, 11, 12, 13, 14];
    let cov = DMatrix::from_fn(15, 15, |i, j| imu.cov[(PERM[i], PERM[j])]);
    whitener(cov, "IMU preintegration")
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Total whitened cost over `states`; fills `sys` with the linearization
/// when given. The first `dense` tracks get explicit columns after the
/// keyframe block, the rest are kept apart for elimination; the prior's
/// landmarks must lead the dense tracks in the prior's order.
/// Observations behind a camera make the cost infinite.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    params: &WindowParams,
    states: &[RobotState],
    intervals: &[Interval],
    prior: &Prior,
    tracks: &[Track],
    dense: usize,
    lms: &[Vector3<f64>],
    mut sys: Option<&mut System>,
) -> Result<f64> {
    let mode = params.mode;
    let d = state_dim(mode);
    let calib = mode.calibrates();
    let n_pose = states.len() * d;
    let mut cost = 0.0;

    let np = prior.landmarks.len();
    debug_assert!(np <= dense && tracks.iter().zip(&prior.landmarks).all(|(t, id)| t.id == *id));
    let (r, j) = prior.residual(states, &lms[..np], sys.is_some())?;
    cost += r.norm_squared();
    if let (Some(s), Some(j)) = (sys.as_deref_mut(), j) {
        let cols: Vec<_> = (0..prior.len() * d)
            .chain((0..3 * np).map(|c| n_pose + c))
            .map(Some)
            .collect();
        s.add(&r, &j, &cols);
    }

    for (k, iv) in intervals.iter().enumerate().take(states.len() - 1) {
        let (xk, xk1) = (&states[k], &states[k + 1]);
        let (r, j) = iv.imu.residual_and_jacobians(xk, xk1, &params.gravity_w, sys.is_some())?;
        let w = imu_whitener(&iv.imu)?;
        let rw = &w * DVector::from_column_slice(r.as_slice());
        cost += rw.norm_squared();
        if let (Some(s), Some(j)) = (sys.as_deref_mut(), j) {
            let cols: Vec<_> = (0..30).map(|c| Some(if c < 15 { k * d + c } else { (k + 1) * d + c - 15 })).collect();
            s.add(&rw, &(&w * to_dmatrix(&j)), &cols);
        }
        if !mode.uses_legs() {
            continue;
        }
        for pre in &iv.legs {
            let (r, j) = pre.residual_and_jacobian(xk, xk1);
            let m = if calib { 4 } else { 3 };
            let cov = pre.eps_rho_covariance();
            let w = whitener(DMatrix::from_fn(m, m, |a, b| cov[(a, b)]), "leg preintegration")?;
            let rw = &w * DVector::from_fn(m, |a, _| r[a]);
            cost += rw.norm_squared();
            if let Some(s) = sys.as_deref_mut() {
                let (o0, o1) = (k * d, (k + 1) * d);
                let rho = |o: usize| calib.then_some(o + RHO + pre.leg);
                let cols: Vec<Option<usize>> = (0..3)
                    .map(|c| Some(o0 + P + c))
                    .chain((0..3).map(|c| Some(o0 + TH + c)))
                    .chain((0..3).map(|c| Some(o0 + BW + c)))
                    .chain([rho(o0)])
                    .chain((0..3).map(|c| Some(o1 + P + c)))
                    .chain([rho(o1)])
                    .collect();
                let jm = DMatrix::from_fn(m, 14, |a, b| j[(a, b)]);
                s.add(&rw, &(&w * jm), &cols);
            }
        }
    }

    let sigma = params.camera.normalized_sigma(params.solver.pixel_sigma);
    let k = params.solver.huber;
    let cams = [params.camera.view(false), params.camera.view(true)];
    for (ti, tr) in tracks.iter().enumerate() {
        for &View { kf, uv, right } in &tr.obs {
            let Some(t) = vision_residual(&states[kf], &lms[ti], &uv, &cams[right as usize]) else {
                return Ok(f64::INFINITY);
            };
            let n = t.residual.norm() / sigma;
            cost += huber_cost(n, k);
            let Some(s) = sys.as_deref_mut() else { continue };
            let sw = huber_sqrt_weight(n, k) / sigma;
            let (r, jp, jl) = (t.residual * sw, t.d_pose * sw, t.d_landmark * sw);
            let o = kf * d;
            if ti < dense {
                let mut j = DMatrix::zeros(2, 9);
                j.view_mut((0, 0), (2, 6)).copy_from(&jp);
                j.view_mut((0, 6), (2, 3)).copy_from(&jl);
                let cols: Vec<_> = (o..o + 6).chain(n_pose + 3 * ti..n_pose + 3 * ti + 3).map(Some).collect();
                s.add(&DVector::from_column_slice(r.as_slice()), &j, &cols);
                continue;
            }
            let mut hpp = s.h.view_mut((o, o), (6, 6));
            hpp += jp.tr_mul(&jp);
            let mut gp = s.g.rows_mut(o, 6);
            gp += jp.tr_mul(&r);
            let blk = &mut s.lms[ti - dense];
            blk.hll += jl.tr_mul(&jl);
            blk.gl += jl.tr_mul(&r);
            blk.w.push((kf, jp.tr_mul(&jl)));
        }
    }
    Ok(cost)
}

/// Damped step with landmarks eliminated by Schur complement. `None` when
/// the damped system is not positive definite.
fn damped_step(sys: &System, lambda: f64, d: usize) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = sys.h.nrows();
    let mut s = sys.h.clone();
    for i in 0..n {
        s[(i, i)] += lambda * sys.h[(i, i)].max(1e-6);
    }
    let mut gs = sys.g.clone();
    let mut invs = Vec::with_capacity(sys.lms.len());
    for b in &sys.lms {
        let mut hll = b.hll;
        for i in 0..3 {
            hll[(i, i)] += lambda * b.hll[(i, i)].max(1e-6);
        }
        let inv = hll.try_inverse()?;
        for (ka, wa) in &b.w {
            let wai = wa * inv;
            let oa = ka * d;
            let mut ga = gs.rows_mut(oa, 6);
            ga -= wai * b.gl;
            for (kb, wb) in &b.w {
                let mut sab = s.view_mut((oa, kb * d), (6, 6));
                sab -= wai * wb.transpose();
            }
        }
        invs.push(inv);
    }
    let dx = -s.cholesky()?.solve(&gs);
    let dl = sys
        .lms
        .iter()
        .zip(&invs)
        .map(|(b, inv)| {
            let mut rhs = b.gl;
            for (ka, wa) in &b.w {
                rhs += wa.transpose() * dx.rows(ka * d, 6);
            }
            -(inv * rhs)
        })
        .collect();
    Some((dx, dl))
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub params: WindowParams,
    keyframes: Vec<Keyframe>,
    intervals: Vec<Interval>,
    landmarks: BTreeMap<u32, Vector3<f64>>,
    prior: Prior,
}

impl SlidingWindow {
    /// Window holding only the first keyframe, anchored by a diagonal prior.
    pub fn new(
        params: WindowParams,
        t: f64,
        state: RobotState,
        obs: Vec<Feature>,
        sigmas: &PriorSigmas,
    ) -> SlidingWindow {
        let prior = Prior::from_sigmas(state, sigmas, state_dim(params.mode));
        SlidingWindow {
            params,
            keyframes: vec![Keyframe { t, state, obs }],
            intervals: Vec::new(),
            landmarks: BTreeMap::new(),
            prior,
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn newest(&self) -> &Keyframe {
        self.keyframes.last().expect("window is never empty")
    }

    pub fn landmarks(&self) -> &BTreeMap<u32, Vector3<f64>> {
        &self.landmarks
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// Overwrites keyframe states, e.g. to start from ground truth.
    pub fn set_states(&mut self, states: &[RobotState]) -> Result<()> {
        if states.len() != self.keyframes.len() {
            return Err(Error::Config("state count does not match the window".into()));
        }
        for (k, x) in self.keyframes.iter_mut().zip(states) {
            k.state = *x;
        }
        Ok(())
    }

    pub fn set_landmark(&mut self, id: u32, position: Vector3<f64>) {
        self.landmarks.insert(id, position);
    }

    /// Appends a keyframe at `t`, initialized by IMU propagation over
    /// `interval`, marginalizing the oldest keyframe first when full.
    pub fn add_keyframe(&mut self, t: f64, interval: Interval, obs: Vec<Feature>) -> Result<()> {
        let last = self.newest();
        if !(t > last.t) {
            return Err(Error::TimeOrdering { t, last: last.t });
        }
        let (t0, t1) = (interval.imu.start_time(), interval.imu.end_time());
        if (t0 - last.t).abs() > 1e-9 || (t1 - t).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "preintegration spans [{t0}, {t1}] but the keyframe gap is [{}, {t}]",
                last.t
            )));
        }
        let legs_expected = if self.params.mode.uses_legs() { NUM_LEGS } else { 0 };
        if interval.legs.len() != legs_expected {
            return Err(Error::Config(format!(
                "{} mode needs {legs_expected} leg preintegrations, got {}",
                self.params.mode,
                interval.legs.len()
            )));
        }
        let state = propagate(&last.state, &interval.imu, &self.params.gravity_w);
        self.marginalize_oldest()?;
        self.keyframes.push(Keyframe { t, state, obs });
        self.intervals.push(interval);
        self.triangulate_new();
        Ok(())
    }

    /// Marginalizes the oldest keyframe if the window is full; returns
    /// whether it did.
    pub fn marginalize_oldest(&mut self) -> Result<bool> {
        if self.keyframes.len() < self.params.solver.window_size {
            return Ok(false);
        }
        self.marginalize_front()?;
        Ok(true)
    }

    /// Schur complement of the oldest keyframe, and of the landmarks last
    /// seen there, out of the factors touching them: the prior, the IMU/leg
    /// factors to the next keyframe and the oldest keyframe's observations.
    /// Landmarks it saw that later keyframes still observe join the prior
    /// when `prior_landmarks` is set; otherwise the oldest keyframe's views
    /// of them are dropped.
    fn marginalize_front(&mut self) -> Result<()> {
        if self.keyframes.len() < 2 {
            return Err(Error::Config("cannot marginalize the only keyframe".into()));
        }
        let d = state_dim(self.params.mode);
        let states: Vec<_> = self.keyframes.iter().map(|k| k.state).collect();
        let n_pose = states.len() * d;
        let np = self.prior.landmarks.len();
        let mut sel = Vec::new();
        let mut eliminate = Vec::new();
        for (i, t) in self.tracks().into_iter().enumerate() {
            let (first, later): (Vec<View>, Vec<View>) = t.obs.iter().partition(|o| o.kf == 0);
            if i >= np && first.is_empty() {
                continue;
            }
            if !self.params.solver.prior_landmarks && !later.is_empty() {
                continue;
            }
            eliminate.push(later.is_empty());
            sel.push(Track { id: t.id, obs: first });
        }
        let lms: Vec<_> = sel.iter().map(|t| self.landmarks[&t.id]).collect();
        let mut sys = System::new(n_pose + 3 * sel.len(), 0);
        evaluate(
            &self.params,
            &states,
            &self.intervals[..1],
            &self.prior,
            &sel,
            sel.len(),
            &lms,
            Some(&mut sys),
        )?;

        let last = self.prior.len().saturating_sub(1).max(1);
        let lm_cols = |keep: bool| {
            eliminate
                .iter()
                .enumerate()
                .filter(move |(_, e)| **e != keep)
                .flat_map(move |(i, _)| n_pose + 3 * i..n_pose + 3 * i + 3)
        };
        let elim: Vec<usize> = (0..d).chain(lm_cols(false)).collect();
        let keep: Vec<usize> = (d..(last + 1) * d).chain(lm_cols(true)).collect();
        let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| sys.h[(r[i], c[j])]);
        let (hee, hek, hkk) = (sub(&elim, &elim), sub(&elim, &keep), sub(&keep, &keep));
        let ge = DVector::from_fn(elim.len(), |i, _| sys.g[elim[i]]);
        let gk = DVector::from_fn(keep.len(), |i, _| sys.g[keep[i]]);
        let hee_inv = pseudo_inverse(&hee);
        let hs = &hkk - hek.transpose() * &hee_inv * &hek;
        let gs = &gk - hek.transpose() * &hee_inv * &ge;
        let (sqrt_info, r0) = factor_information(&hs, &gs);

        let kept: Vec<(u32, Vector3<f64>)> = sel
            .iter()
            .zip(&eliminate)
            .filter(|(_, e)| !**e)
            .map(|(t, _)| (t.id, self.landmarks[&t.id]))
            .collect();
        for (t, _) in sel.iter().zip(&eliminate).filter(|(_, e)| **e) {
            self.landmarks.remove(&t.id);
        }
        self.prior = Prior {
            x0: states[1..=last].to_vec(),
            landmarks: kept.iter().map(|k| k.0).collect(),
            l0: kept.iter().map(|k| k.1).collect(),
            sqrt_info,
            r0,
        };
        self.keyframes.remove(0);
        self.intervals.remove(0);
        let seen: BTreeSet<u32> = self.keyframes.iter().flat_map(|k| k.obs.iter().map(|o| o.id)).collect();
        let prior_lms: BTreeSet<u32> = self.prior.landmarks.iter().copied().collect();
        self.landmarks.retain(|id, _| seen.contains(id) || prior_lms.contains(id));
        Ok(())
    }

    fn bearing(&self, v: &View) -> Bearing {
        let x = &self.keyframes[v.kf].state;
        let (center, rot_wc) = self.params.camera.view(v.right).world_pose(&x.p, &x.q);
        Bearing { center, rot_wc, obs: v.uv }
    }

    fn in_front(&self, v: &View, l: &Vector3<f64>) -> bool {
        let x = &self.keyframes[v.kf].state;
        self.params.camera.view(v.right).to_camera(&x.p, &x.q, l).z > MIN_DEPTH
    }

    fn observations_by_landmark(&self) -> BTreeMap<u32, Vec<View>> {
        let mut out: BTreeMap<u32, Vec<_>> = BTreeMap::new();
        for (kf, frame) in self.keyframes.iter().enumerate() {
            for f in &frame.obs {
                let views = out.entry(f.id).or_default();
                views.push(View { kf, uv: f.uv, right: false });
                if let Some(uv) = f.uv_right {
                    views.push(View { kf, uv, right: true });
                }
            }
        }
        out
    }

    /// Triangulates landmarks seen by the newest keyframe once they have
    /// two or more views with enough parallax.
    fn triangulate_new(&mut self) {
        let min_par = self.params.solver.min_parallax_deg.to_radians();
        let index = self.observations_by_landmark();
        let newest = self.keyframes.len() - 1;
        let max_depth = 2.0 * self.params.camera.max_depth;
        let mut found = Vec::new();
        for f in &self.keyframes[newest].obs {
            if self.landmarks.contains_key(&f.id) {
                continue;
            }
            let obs = &index[&f.id];
            if obs.len() < 2 {
                continue;
            }
            let views: Vec<_> = obs.iter().map(|v| self.bearing(v)).collect();
            if max_parallax(&views) < min_par {
                continue;
            }
            let Some(l) = triangulate(&views) else { continue };
            let plausible = obs.iter().all(|v| {
                let x = &self.keyframes[v.kf].state;
                let z = self.params.camera.view(v.right).to_camera(&x.p, &x.q, &l).z;
                z > MIN_DEPTH && z < max_depth
            });
            if plausible {
                found.push((f.id, l));
            }
        }
        self.landmarks.extend(found);
    }

    /// Landmarks in the prior first, in the prior's order, with whatever
    /// observations remain; then every other triangulated landmark with two
    /// or more views in front of the camera.
    fn tracks(&self) -> Vec<Track> {
        let index = self.observations_by_landmark();
        let valid = |id: u32, l: &Vector3<f64>| -> Vec<View> {
            index
                .get(&id)
                .into_iter()
                .flatten()
                .filter(|v| self.in_front(v, l))
                .copied()
                .collect()
        };
        let mut out: Vec<Track> = self
            .prior
            .landmarks
            .iter()
            .map(|id| Track {
                id: *id,
                obs: valid(*id, &self.landmarks[id]),
            })
            .collect();
        let in_prior: BTreeSet<u32> = self.prior.landmarks.iter().copied().collect();
        for id in index.keys() {
            if in_prior.contains(id) {
                continue;
            }
            let Some(l) = self.landmarks.get(id) else { continue };
            let obs = valid(*id, l);
            if obs.len() >= 2 {
                out.push(Track { id: *id, obs });
            }
        }
        out
    }

    /// Re-integrates intervals whose linearization points drifted past the
    /// first-order correction thresholds.
    fn refresh_preintegrations(&mut self) -> Result<()> {
        for k in 0..self.intervals.len() {
            let x = self.keyframes[k].state;
            if self.intervals[k].needs_reintegration(&x) {
                self.intervals[k] = self.intervals[k].reintegrated(&x, &self.params)?;
            }
        }
        Ok(())
    }

    fn linearize(&self, tracks: &[Track], lms: &[Vector3<f64>], states: &[RobotState]) -> Result<(f64, System)> {
        let d = state_dim(self.params.mode);
        let dense = self.prior.landmarks.len();
        let mut sys = System::new(states.len() * d + 3 * dense, tracks.len() - dense);
        let c = evaluate(&self.params, states, &self.intervals, &self.prior, tracks, dense, lms, Some(&mut sys))?;
        Ok((c, sys))
    }

    /// Whitened cost at the current estimate.
    pub fn cost(&self) -> Result<f64> {
        let tracks = self.tracks();
        let lms: Vec<_> = tracks.iter().map(|t| self.landmarks[&t.id]).collect();
        let states: Vec<_> = self.keyframes.iter().map(|k| k.state).collect();
        let dense = self.prior.landmarks.len();
        evaluate(&self.params, &states, &self.intervals, &self.prior, &tracks, dense, &lms, None)
    }

    /// Condition number of the landmark-reduced normal matrix.
    pub fn condition_number(&self) -> Result<f64> {
        let tracks = self.tracks();
        let lms: Vec<_> = tracks.iter().map(|t| self.landmarks[&t.id]).collect();
        let states: Vec<_> = self.keyframes.iter().map(|k| k.state).collect();
        let d = state_dim(self.params.mode);
        let (_, sys) = self.linearize(&tracks, &lms, &states)?;
        // A vanishing damping leaves the reduced matrix itself.
        let mut s = sys.h.clone();
        for b in &sys.lms {
            let inv = b.hll.try_inverse().unwrap_or_else(Matrix3::zeros);
            for (ka, wa) in &b.w {
                for (kb, wb) in &b.w {
                    let mut sab = s.view_mut((ka * d, kb * d), (6, 6));
                    sab -= wa * inv * wb.transpose();
                }
            }
        }
        let ev = s.symmetric_eigen().eigenvalues;
        Ok(ev.max() / ev.min().max(f64::MIN_POSITIVE))
    }

    /// Levenberg-Marquardt over all keyframe states and active landmarks.
    pub fn solve(&mut self) -> Result<SolveReport> {
        if self.keyframes.len() < 2 {
            return Err(Error::Config("solving needs at least two keyframes".into()));
        }
        self.refresh_preintegrations()?;
        let cfg = self.params.solver;
        let d = state_dim(self.params.mode);
        let tracks = self.tracks();
        let dense = self.prior.landmarks.len();
        let mut lms: Vec<_> = tracks.iter().map(|t| self.landmarks[&t.id]).collect();
        let mut states: Vec<_> = self.keyframes.iter().map(|k| k.state).collect();
        let n_pose = states.len() * d;
        let eval = |states: &[RobotState], lms: &[Vector3<f64>]| {
            evaluate(&self.params, states, &self.intervals, &self.prior, &tracks, dense, lms, None)
        };

        let mut cost = eval(&states, &lms)?;
        if !cost.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite cost in the window ending at t = {}",
                self.newest().t
            )));
        }
        let initial_cost = cost;
        let mut lambda = cfg.lambda_init;
        let mut iterations = 0;
        'outer: while iterations < cfg.max_iterations && cost >= cfg.abs_tol {
            let (_, sys) = self.linearize(&tracks, &lms, &states)?;
            iterations += 1;
            let mut factorized = false;
            loop {
                if lambda > cfg.lambda_max {
                    if !factorized {
                        return Err(Error::Diverged(format!(
                            "normal equations singular up to damping {} at t = {}",
                            cfg.lambda_max,
                            self.newest().t
                        )));
                    }
                    break 'outer;
                }
                let Some((dx, dl)) = damped_step(&sys, lambda, d) else {
                    lambda *= 10.0;
                    continue;
                };
                factorized = true;
                let cand: Vec<_> = states
                    .iter()
                    .enumerate()
                    .map(|(i, x)| retract(x, &dx.as_slice()[i * d..(i + 1) * d]))
                    .collect();
                let cand_lms: Vec<_> = lms
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        if i < dense {
                            l + dx.fixed_rows::<3>(n_pose + 3 * i)
                        } else {
                            l + dl[i - dense]
                        }
                    })
                    .collect();
                let c = eval(&cand, &cand_lms)?;
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost;
                    states = cand;
                    lms = cand_lms;
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-12);
                    if rel < cfg.rel_tol {
                        break 'outer;
                    }
                    break;
                }
                lambda *= 4.0;
            }
        }

        for (k, x) in self.keyframes.iter_mut().zip(&states) {
            k.state = *x;
        }
        for (t, l) in tracks.iter().zip(&lms) {
            self.landmarks.insert(t.id, *l);
        }
        self.refresh_preintegrations()?;
        Ok(SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            landmarks: tracks.len(),
            observations: tracks.iter().map(|t| t.obs.len()).sum(),
        })
    }
}

/// Inverse of a symmetric positive semi-definite matrix on its numerical
/// range.
fn pseudo_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = (0.5 * (h + h.transpose())).symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let mut inv = DMatrix::zeros(n, n);
    for i in 0..n {
        let e = eig.eigenvalues[i];
        if e > 1e-12 * top {
            let v = eig.eigenvectors.column(i);
            inv += (v * v.transpose()) / e;
        } else if top > 0.0 {
            warn!("dropping a rank-deficient direction while marginalizing");
        }
    }
    inv
}

/// Square-root form `(J, r0)` of the quadratic `½δᵀHδ + gᵀδ`, so that
/// `‖r0 + Jδ‖²` has the same minimizer and curvature. Directions without
/// information are dropped.
fn factor_information(h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let h = 0.5 * (h + h.transpose());
    if let Some(chol) = h.clone().cholesky() {
        let l = chol.l();
        // Cholesky succeeds on barely definite matrices; only trust it with
        // a sane pivot ratio.
        let diag = l.diagonal();
        if diag.min() > 1e-6 * diag.max() {
            let r0 = l.solve_lower_triangular(g).expect("positive pivots");
            return (l.transpose(), r0);
        }
    }
    let m = h.nrows();
    let eig = h.symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 1e-12 * top).collect();
    let mut sqrt_info = DMatrix::zeros(keep.len(), m);
    let mut r0 = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        sqrt_info.row_mut(row).copy_from(&(v.transpose() * s));
        r0[row] = v.dot(g) / s;
    }
    (sqrt_info, r0)
}
