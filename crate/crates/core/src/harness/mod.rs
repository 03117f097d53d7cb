//! Dataset I/O, run configuration, metrics and the end-to-end runner.

pub mod check;
pub mod config;
pub mod dataset;
pub mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::factor_graph::{run_estimator, EstimatorMode, EstimatorOutput, TrajectoryPoint};
use crate::kinematics::LEG_NAMES;

pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use metrics::{MetricsReport, ModeMetrics, ModeTiming};

/// Writes through a sibling temporary file and renames it into place, so a
/// failed run never leaves a truncated output behind.
pub(crate) fn write_atomically(path: &Path, f: impl FnOnce(&mut File) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f(&mut file)?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomically(path, |f| f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub const TRAJECTORY_HEADER: &str = "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz";

pub fn write_trajectory_csv(w: impl Write, traj: &[TrajectoryPoint]) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    write!(w, "{TRAJECTORY_HEADER}")?;
    for leg in LEG_NAMES {
        write!(w, ",rho_{leg}")?;
    }
    writeln!(w)?;
    for p in traj {
        let s = &p.state;
        let q = s.q.as_vector4();
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.t, s.p.x, s.p.y, s.p.z, q[0], q[1], q[2], q[3], s.v.x, s.v.y, s.v.z
        )?;
        for r in s.rho_vector() {
            write!(w, ",{r}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

fn save_trajectory(path: &Path, traj: &[TrajectoryPoint]) -> Result<()> {
    write_atomically(path, |f| write_trajectory_csv(f, traj).map_err(|e| Error::io(path, e)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the given modes, concurrently when there are several.
pub fn run_modes(d: &Dataset, modes: &[EstimatorMode], cfg: &RunConfig) -> Result<Vec<EstimatorOutput>> {
    if modes.len() == 1 {
        return Ok(vec![run_estimator(d, modes[0], &cfg.estimator)?]);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&m| s.spawn(move || run_estimator(d, m, &cfg.estimator)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

pub struct RunSummary {
    pub metrics: MetricsReport,
    pub timing: Vec<ModeTiming>,
}

/// Runs `modes` over a dataset and writes, into `out`:
/// `trajectory_<mode>.csv`, `metrics.json`, `table.txt`, `config.toml` and
/// the wall-clock figures in `timing.json`.
pub fn run_to_dir(d: &Dataset, modes: &[EstimatorMode], cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    ensure_dir(out)?;
    let outputs = run_modes(d, modes, cfg)?;
    let metrics = metrics::report(&outputs, d)?;
    let timing: Vec<ModeTiming> = outputs.iter().map(ModeTiming::new).collect();
    for o in &outputs {
        save_trajectory(&out.join(format!("trajectory_{}.csv", o.mode.name())), &o.trajectory)?;
    }
    write_json(&out.join("metrics.json"), &metrics)?;
    write_text(&out.join("table.txt"), &metrics::format_table(&metrics, None))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_json(&out.join("timing.json"), &timing)?;
    Ok(RunSummary { metrics, timing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::RobotState;
    use nalgebra::Vector3;

    #[test]
    fn trajectory_csv_layout() {
        let mut state = RobotState::new(
            Vector3::new(1.0, 2.0, 0.3),
            crate::so3::UnitQuaternion::identity(),
            Vector3::new(0.5, 0.0, 0.0),
            0.21,
        );
        state.rho[3].calf_length = 0.2295;
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[TrajectoryPoint { t: 0.5, state }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines[0],
            "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,rho_fl,rho_fr,rho_rl,rho_rr"
        );
        assert_eq!(lines[1], "0.5,1,2,0.3,1,0,0,0,0.5,0,0,0.21,0.21,0.21,0.2295");
    }
}
