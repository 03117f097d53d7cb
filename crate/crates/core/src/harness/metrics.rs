//! Trajectory error metrics and contact-rejection scores.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{EstimatorMode, EstimatorOutput, TrajectoryPoint};
use crate::harness::dataset::{Dataset, GtRecord};
use crate::kinematics::NUM_LEGS;
use crate::so3::UnitQuaternion;

/// Shortest path over which drift is defined, metres.
pub const MIN_PATH_LENGTH: f64 = 1.0;

/// Final position error as a percentage of the distance travelled.
pub fn compute_drift(est_end: &Vector3<f64>, truth_end: &Vector3<f64>, path_length: f64) -> Result<f64> {
    if !(path_length >= MIN_PATH_LENGTH) {
        return Err(Error::Metric(format!(
            "drift needs a path of at least {MIN_PATH_LENGTH} m, got {path_length} m"
        )));
    }
    Ok(100.0 * (est_end - truth_end).norm() / path_length)
}

/// Position RMSE after moving the estimate rigidly so that its first pose
/// coincides with the first true pose.
pub fn compute_ate(
    est: &[(Vector3<f64>, UnitQuaternion)],
    truth: &[(Vector3<f64>, UnitQuaternion)],
) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} estimated poses for {} true poses",
            est.len(),
            truth.len()
        )));
    }
    let (Some(e0), Some(t0)) = (est.first(), truth.first()) else {
        return Err(Error::Metric("empty trajectory".into()));
    };
    let rot = t0.1.rotation_matrix() * e0.1.rotation_matrix().transpose();
    let sum: f64 = est
        .iter()
        .zip(truth)
        .map(|(e, t)| (rot * (e.0 - e0.0) + t0.0 - t.0).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Ground-truth records at the given stamps, which must fall on samples.
pub fn truth_at<'a>(stamps: &[f64], gt: &'a [GtRecord], rate: f64) -> Result<Vec<&'a GtRecord>> {
    let tol = 0.25 / rate;
    stamps
        .iter()
        .map(|&t| {
            let i = gt.partition_point(|g| g.t < t - tol);
            gt.get(i)
                .filter(|g| (g.t - t).abs() <= tol)
                .ok_or_else(|| Error::Metric(format!("no ground truth at t = {t}")))
        })
        .collect()
}

/// Ground-truth distance travelled between two stamps.
pub fn path_length_between(gt: &[GtRecord], t0: f64, t1: f64) -> f64 {
    let lo = gt.partition_point(|g| g.t < t0);
    let hi = gt.partition_point(|g| g.t <= t1);
    gt[lo..hi].windows(2).map(|w| (w[1].p - w[0].p).norm()).sum()
}

/// Contact flags reverted by the filter, scored against the slip labels.
/// Sample scores count leg-samples the sensor flagged in contact; event
/// scores count whole slips and whole runs of reverted samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactScores {
    pub slips: usize,
    pub slips_detected: usize,
    pub reverted_runs: usize,
    pub false_runs: usize,
    pub sample_precision: f64,
    pub sample_recall: f64,
    pub event_precision: f64,
    pub event_recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `flags[k]` are the flags used at dataset sample `first + k`.
pub fn contact_scores(flags: &[[bool; NUM_LEGS]], first: usize, d: &Dataset) -> Result<ContactScores> {
    if first + flags.len() > d.leg.len() || d.gt.len() != d.leg.len() {
        return Err(Error::Metric("contact flags do not line up with the dataset".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut s = ContactScores {
        slips: 0,
        slips_detected: 0,
        reverted_runs: 0,
        false_runs: 0,
        sample_precision: 0.0,
        sample_recall: 0.0,
        event_precision: 0.0,
        event_recall: 0.0,
    };
    for leg in 0..NUM_LEGS {
        // (any reverted, any slipping) for the current slip and reverted run.
        let mut slip_run: Option<bool> = None;
        let mut revert_run: Option<bool> = None;
        for (k, f) in flags.iter().enumerate() {
            let i = first + k;
            let sensor = d.leg[i].contact[leg];
            let slipping = d.gt[i].slip[leg];
            let reverted = sensor && !f[leg];
            match (reverted, slipping) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
            if slipping {
                let seen = slip_run.get_or_insert(false);
                *seen |= reverted;
            } else if let Some(seen) = slip_run.take() {
                s.slips += 1;
                s.slips_detected += seen as usize;
            }
            if reverted {
                let hit = revert_run.get_or_insert(false);
                *hit |= slipping;
            } else if let Some(hit) = revert_run.take() {
                s.reverted_runs += 1;
                s.false_runs += !hit as usize;
            }
        }
        if let Some(seen) = slip_run {
            s.slips += 1;
            s.slips_detected += seen as usize;
        }
        if let Some(hit) = revert_run {
            s.reverted_runs += 1;
            s.false_runs += !hit as usize;
        }
    }
    s.sample_precision = ratio(tp, tp + fp);
    s.sample_recall = ratio(tp, tp + fneg);
    s.event_precision = ratio(s.reverted_runs - s.false_runs, s.reverted_runs);
    s.event_recall = ratio(s.slips_detected, s.slips);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: EstimatorMode,
    pub keyframes: usize,
    pub path_length: f64,
    pub drift_percent: f64,
    pub ate_rmse: f64,
    /// Estimated minus true position at the last keyframe.
    pub final_error: [f64; 3],
    pub final_rho: [f64; NUM_LEGS],
    /// `[t, ρ_fl, ρ_fr, ρ_rl, ρ_rr]` about once per second.
    pub rho_trace: Vec<[f64; 1 + NUM_LEGS]>,
    /// Absent for modes that take the sensor flags as they are.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub duration: f64,
    pub path_length: f64,
    pub true_rho: [f64; NUM_LEGS],
    pub modes: Vec<ModeMetrics>,
}

/// Wall-clock figures, kept apart from the metrics so those stay
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: EstimatorMode,
    pub solves: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub mean_iterations: f64,
}

impl ModeTiming {
    pub fn new(out: &EstimatorOutput) -> ModeTiming {
        let n = out.solve_ms.len();
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        ModeTiming {
            mode: out.mode,
            solves: n,
            mean_solve_ms: mean(out.solve_ms.iter().sum()),
            max_solve_ms: out.solve_ms.iter().copied().fold(0.0, f64::max),
            mean_iterations: mean(out.iterations.iter().sum::<usize>() as f64),
        }
    }
}

fn rho_trace(traj: &[TrajectoryPoint]) -> Vec<[f64; 1 + NUM_LEGS]> {
    let mut out: Vec<[f64; 1 + NUM_LEGS]> = Vec::new();
    let mut next = f64::NEG_INFINITY;
    for (k, p) in traj.iter().enumerate() {
        if p.t >= next || k + 1 == traj.len() {
            let r = p.state.rho_vector();
            out.push([p.t, r[0], r[1], r[2], r[3]]);
            next = p.t + 1.0 - 1e-9;
        }
    }
    out
}

pub fn evaluate(out: &EstimatorOutput, d: &Dataset) -> Result<ModeMetrics> {
    let traj = &out.trajectory;
    let (Some(first), Some(last)) = (traj.first(), traj.last()) else {
        return Err(Error::Metric(format!("mode {} produced no keyframes", out.mode)));
    };
    let stamps: Vec<f64> = traj.iter().map(|p| p.t).collect();
    let truth = truth_at(&stamps, &d.gt, d.header.imu_rate)?;
    let path_length = path_length_between(&d.gt, first.t, last.t);
    let end = truth.last().expect("same length as the trajectory");
    let err = last.state.p - end.p;
    let est: Vec<_> = traj.iter().map(|p| (p.state.p, p.state.q)).collect();
    let tru: Vec<_> = truth.iter().map(|g| (g.p, g.q)).collect();
    let contact = match out.mode {
        EstimatorMode::Vio => None,
        _ => Some(contact_scores(&out.contact, out.first_sample, d)?),
    };
    Ok(ModeMetrics {
        mode: out.mode,
        keyframes: traj.len(),
        path_length,
        drift_percent: compute_drift(&last.state.p, &end.p, path_length)?,
        ate_rmse: compute_ate(&est, &tru)?,
        final_error: [err.x, err.y, err.z],
        final_rho: last.state.rho_vector(),
        rho_trace: rho_trace(traj),
        contact,
    })
}

pub fn report(outputs: &[EstimatorOutput], d: &Dataset) -> Result<MetricsReport> {
    let true_rho = d.gt.last().map(|g| g.rho).ok_or(Error::MissingStream("gt"))?;
    Ok(MetricsReport {
        duration: d.duration(),
        path_length: d.path_length(),
        true_rho,
        modes: outputs.iter().map(|o| evaluate(o, d)).collect::<Result<_>>()?,
    })
}

/// Plain-text table, one row per mode.
pub fn format_table(r: &MetricsReport, timing: Option<&[ModeTiming]>) -> String {
    let mut s = format!(
        "{:<11} {:>9} {:>9} {:>27} {:>8}",
        "mode", "drift %", "ATE m", "final error xyz m", "rho mm"
    );
    if timing.is_some() {
        s += &format!(" {:>9}", "solve ms");
    }
    s.push('\n');
    for m in &r.modes {
        let rho_err = m
            .final_rho
            .iter()
            .zip(&r.true_rho)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        s += &format!(
            "{:<11} {:>9.3} {:>9.4} {:>9.3}{:>9.3}{:>9.3} {:>8.2}",
            m.mode.name(),
            m.drift_percent,
            m.ate_rmse,
            m.final_error[0],
            m.final_error[1],
            m.final_error[2],
            rho_err * 1e3
        );
        if let Some(t) = timing.and_then(|t| t.iter().find(|t| t.mode == m.mode)) {
            s += &format!(" {:>9.1}", t.mean_solve_ms);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose(x: f64, y: f64, z: f64, yaw: f64) -> (Vector3<f64>, UnitQuaternion) {
        (Vector3::new(x, y, z), UnitQuaternion::from_yaw_pitch_roll(yaw, 0.0, 0.0))
    }

    #[test]
    fn drift_examples() {
        let z = Vector3::zeros();
        assert_eq!(compute_drift(&Vector3::new(1.0, 0.0, 0.0), &z, 100.0).unwrap(), 1.0);
        assert_eq!(compute_drift(&z, &z, 10.0).unwrap(), 0.0);
        let d = compute_drift(&Vector3::new(0.0, 2.22, 0.0), &z, 260.0).unwrap();
        assert!((d - 0.85).abs() < 5e-3, "{d}");
        assert!(matches!(compute_drift(&z, &z, 0.5), Err(Error::Metric(_))));
    }

    #[test]
    fn ate_alignment_semantics() {
        let truth: Vec<_> = (0..5).map(|i| pose(i as f64, 0.0, 0.3, 0.0)).collect();
        assert_eq!(compute_ate(&truth, &truth).unwrap(), 0.0);

        let shifted: Vec<_> = truth.iter().map(|(p, q)| (p + Vector3::x(), *q)).collect();
        assert!(compute_ate(&shifted, &truth).unwrap() < 1e-12);

        let mut late = truth.clone();
        for p in &mut late[1..] {
            p.0.x += 1.0;
        }
        let expect = (4.0_f64 / 5.0).sqrt();
        assert!((compute_ate(&late, &truth).unwrap() - expect).abs() < 1e-12);

        assert!(compute_ate(&truth[..3], &truth).is_err());
        assert!(compute_ate(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn ate_matches_direct_formula(
            pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64, -3.0..3.0f64), 1..20),
            noise in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64), 20),
            yaw_e in -3.0..3.0f64,
        ) {
            let truth: Vec<_> = pts.iter().map(|&(x, y, z, w)| pose(x, y, z, w)).collect();
            // Estimate in a frame yawed by `yaw_e` about its own first pose.
            let est: Vec<_> = truth
                .iter()
                .zip(&noise)
                .map(|((p, q), n)| (p + Vector3::new(n.0, n.1, n.2), *q))
                .collect();
            let turn = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_e);
            let turned: Vec<_> = est
                .iter()
                .map(|(p, q)| {
                    let tq = UnitQuaternion::from_yaw_pitch_roll(yaw_e, 0.0, 0.0);
                    (turn * p, tq.product(q))
                })
                .collect();
            // Direct evaluation in 2D plus height with explicit angles.
            let (e0, t0) = (&est[0], &truth[0]);
            let mut sum = 0.0;
            for (e, t) in est.iter().zip(&truth) {
                let d = e.0 - e0.0;
                let a = t0.1.yaw() - e0.1.yaw();
                let (s, c) = a.sin_cos();
                let x = c * d.x - s * d.y + t0.0.x - t.0.x;
                let y = s * d.x + c * d.y + t0.0.y - t.0.y;
                let z = d.z + t0.0.z - t.0.z;
                sum += x * x + y * y + z * z;
            }
            let direct = (sum / est.len() as f64).sqrt();
            prop_assert!((compute_ate(&turned, &truth).unwrap() - direct).abs() < 1e-9);
        }

        #[test]
        fn drift_is_nonnegative_and_scales(dx in -10.0..10.0f64, dy in -10.0..10.0f64, len in 1.0..1e3f64) {
            let d = compute_drift(&Vector3::new(dx, dy, 0.0), &Vector3::zeros(), len).unwrap();
            prop_assert!(d >= 0.0);
            let d2 = compute_drift(&Vector3::new(dx, dy, 0.0), &Vector3::zeros(), 2.0 * len).unwrap();
            prop_assert!((d - 2.0 * d2).abs() <= 1e-12 * d.max(1.0));
        }
    }
}
