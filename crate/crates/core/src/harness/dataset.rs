//! Line-delimited JSON datasets: one header object followed by
//! time-ordered `imu`, `leg`, `cam` and `gt` records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::imu_preint::ImuSample;
use crate::kinematics::{JointState, LegGeometry, NUM_LEGS};
use crate::leg_preint::LegSample;
use crate::so3::UnitQuaternion;

pub const SCHEMA_VERSION: u32 = 1;

/// Allowed relative mismatch between header and observed rates.
const RATE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub imu_rate: f64,
    pub leg_rate: f64,
    pub cam_rate: f64,
    /// Magnitude of gravity along world +z, m/s².
    pub gravity: f64,
    pub geometry: [LegGeometry; NUM_LEGS],
    pub camera: CameraModel,
    /// Image noise standard deviation, pixels.
    pub pixel_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u32,
    /// Normalized image coordinates.
    pub uv: [f64; 2],
    /// Same landmark in the second camera of a stereo pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uv_right: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamFrame {
    pub t: f64,
    pub obs: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion,
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bw: Vector3<f64>,
    pub rho: [f64; NUM_LEGS],
    pub contact: [bool; NUM_LEGS],
    /// Foot sliding while flagged in contact.
    pub slip: [bool; NUM_LEGS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: Header,
    pub imu: Vec<ImuSample>,
    /// Same clock as `imu`, one record per IMU sample.
    pub leg: Vec<LegSample>,
    pub cam: Vec<CamFrame>,
    pub gt: Vec<GtRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header(Header),
    Imu {
        t: f64,
        a: [f64; 3],
        w: [f64; 3],
    },
    Leg {
        t: f64,
        phi: [[f64; 3]; NUM_LEGS],
        dphi: [[f64; 3]; NUM_LEGS],
        contact: [u8; NUM_LEGS],
    },
    Cam {
        t: f64,
        obs: Vec<(u32, f64, f64)>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        right: Vec<(u32, f64, f64)>,
    },
    Gt(GtRecord),
}

fn cam_line(c: &CamFrame) -> Line {
    Line::Cam {
        t: c.t,
        obs: c.obs.iter().map(|o| (o.id, o.uv[0], o.uv[1])).collect(),
        right: c
            .obs
            .iter()
            .filter_map(|o| o.uv_right.map(|r| (o.id, r[0], r[1])))
            .collect(),
    }
}

fn flag(c: bool) -> u8 {
    c as u8
}

impl Dataset {
    pub fn duration(&self) -> f64 {
        match (self.imu.first(), self.imu.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Ground-truth path length.
    pub fn path_length(&self) -> f64 {
        self.gt.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum()
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let mut put = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))
        };
        put(&Line::Header(self.header.clone()))?;
        let mut cam = self.cam.iter().peekable();
        let mut leg = self.leg.iter().peekable();
        let mut gt = self.gt.iter().peekable();
        for s in &self.imu {
            put(&Line::Imu {
                t: s.t,
                a: s.accel.into(),
                w: s.gyro.into(),
            })?;
            while let Some(l) = leg.next_if(|l| l.t <= s.t) {
                put(&Line::Leg {
                    t: l.t,
                    phi: l.joints.map(|j| j.phi),
                    dphi: l.joints.map(|j| j.dphi),
                    contact: l.contact.map(flag),
                })?;
            }
            while let Some(c) = cam.next_if(|c| c.t <= s.t) {
                put(&cam_line(c))?;
            }
            while let Some(g) = gt.next_if(|g| g.t <= s.t) {
                put(&Line::Gt(*g))?;
            }
        }
        for l in leg {
            put(&Line::Leg {
                t: l.t,
                phi: l.joints.map(|j| j.phi),
                dphi: l.joints.map(|j| j.dphi),
                contact: l.contact.map(flag),
            })?;
        }
        for c in cam {
            put(&cam_line(c))?;
        }
        for g in gt {
            put(&Line::Gt(*g))?;
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))
    }

    pub fn read_from(r: impl Read) -> Result<Dataset> {
        let reader = BufReader::new(r);
        let mut header: Option<Header> = None;
        let (mut imu, mut leg, mut cam, mut gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut leg_lines = Vec::new();
        let mut last = [f64::NEG_INFINITY; 4];
        let mut check = |k: usize, stream: &'static str, line: usize, t: f64| -> Result<()> {
            if !(t > last[k]) {
                return Err(Error::NonMonotone {
                    stream,
                    line,
                    t,
                    prev: last[k],
                });
            }
            last[k] = t;
            Ok(())
        };
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: lineno,
                msg: e.to_string(),
            })?;
            match parsed {
                Line::Header(h) => {
                    if header.is_some() {
                        return Err(Error::Malformed {
                            line: lineno,
                            msg: "second header".into(),
                        });
                    }
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(Error::SchemaVersion {
                            found: h.schema_version,
                            expected: SCHEMA_VERSION,
                        });
                    }
                    header = Some(h);
                }
                _ if header.is_none() => {
                    return Err(Error::Malformed {
                        line: lineno,
                        msg: "record before header".into(),
                    })
                }
                Line::Imu { t, a, w } => {
                    check(0, "imu", lineno, t)?;
                    imu.push(ImuSample {
                        t,
                        accel: a.into(),
                        gyro: w.into(),
                    });
                }
                Line::Leg {
                    t,
                    phi,
                    dphi,
                    contact,
                } => {
                    check(1, "leg", lineno, t)?;
                    leg_lines.push(lineno);
                    leg.push(LegSample {
                        t,
                        joints: std::array::from_fn(|k| JointState {
                            phi: phi[k],
                            dphi: dphi[k],
                        }),
                        contact: contact.map(|c| c != 0),
                        gyro: Vector3::zeros(),
                    });
                }
                Line::Cam { t, obs, right } => {
                    check(2, "cam", lineno, t)?;
                    let mut obs: Vec<_> = obs
                        .into_iter()
                        .map(|(id, u, v)| Observation {
                            id,
                            uv: [u, v],
                            uv_right: None,
                        })
                        .collect();
                    for (id, u, v) in right {
                        let o = obs.iter_mut().find(|o| o.id == id).ok_or_else(|| Error::Malformed {
                            line: lineno,
                            msg: format!("right view of landmark {id} without a left view"),
                        })?;
                        o.uv_right = Some([u, v]);
                    }
                    cam.push(CamFrame { t, obs });
                }
                Line::Gt(g) => {
                    check(3, "gt", lineno, g.t)?;
                    gt.push(g);
                }
            }
        }
        let header = header.ok_or(Error::MissingStream("header"))?;
        if imu.is_empty() {
            return Err(Error::MissingStream("imu"));
        }
        if leg.is_empty() {
            return Err(Error::MissingStream("leg"));
        }
        if gt.is_empty() {
            return Err(Error::MissingStream("gt"));
        }
        // Leg records share the IMU clock and take their gyro from it.
        if leg.len() != imu.len() {
            return Err(Error::Malformed {
                line: *leg_lines.last().unwrap_or(&0),
                msg: format!("{} leg records for {} IMU records", leg.len(), imu.len()),
            });
        }
        for ((l, s), line) in leg.iter_mut().zip(&imu).zip(&leg_lines) {
            if l.t != s.t {
                return Err(Error::Malformed {
                    line: *line,
                    msg: format!("leg record at t = {} has no IMU record", l.t),
                });
            }
            l.gyro = s.gyro;
        }
        let d = Dataset {
            header,
            imu,
            leg,
            cam,
            gt,
        };
        d.validate_rates()?;
        Ok(d)
    }

    fn validate_rates(&self) -> Result<()> {
        let observed = |ts: &[f64]| -> Option<f64> {
            (ts.len() >= 2).then(|| (ts.len() - 1) as f64 / (ts[ts.len() - 1] - ts[0]))
        };
        let streams: [(&'static str, f64, Vec<f64>); 3] = [
            ("imu", self.header.imu_rate, self.imu.iter().map(|s| s.t).collect()),
            ("leg", self.header.leg_rate, self.leg.iter().map(|s| s.t).collect()),
            ("cam", self.header.cam_rate, self.cam.iter().map(|s| s.t).collect()),
        ];
        for (stream, header, ts) in streams {
            if let Some(obs) = observed(&ts) {
                if ((obs - header) / header).abs() > RATE_TOLERANCE {
                    return Err(Error::RateMismatch {
                        stream,
                        header,
                        observed: obs,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    crate::harness::write_atomically(path, |f| d.write_to(f))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_from(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> Dataset {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            imu_rate: 500.0,
            leg_rate: 500.0,
            cam_rate: 250.0,
            gravity: 9.81,
            geometry: LegGeometry::a1_like(0.21),
            camera: CameraModel::default(),
            pixel_sigma: 1.0,
        };
        let n = 10;
        let imu: Vec<_> = (0..n)
            .map(|i| ImuSample {
                t: i as f64 / 500.0,
                accel: Vector3::new(0.1 * i as f64, 0.0, 9.81),
                gyro: Vector3::new(0.0, 0.01, -0.02 * i as f64),
            })
            .collect();
        let leg = imu
            .iter()
            .map(|s| LegSample {
                t: s.t,
                joints: [JointState {
                    phi: [0.1, 0.7, -1.4],
                    dphi: [0.0, 0.3, -0.1],
                }; NUM_LEGS],
                contact: [true, false, false, true],
                gyro: s.gyro,
            })
            .collect();
        let cam = (0..n / 2)
            .map(|i| CamFrame {
                t: imu[2 * i].t,
                obs: vec![Observation {
                    id: i as u32,
                    uv: [0.1, -0.2],
                    uv_right: (i % 2 == 0).then_some([0.09, -0.2]),
                }],
            })
            .collect();
        let gt = imu
            .iter()
            .map(|s| GtRecord {
                t: s.t,
                p: Vector3::new(s.t, 0.0, 0.3),
                q: UnitQuaternion::identity(),
                v: Vector3::new(1.0, 0.0, 0.0),
                ba: Vector3::zeros(),
                bw: Vector3::zeros(),
                rho: [0.23; NUM_LEGS],
                contact: [true, false, false, true],
                slip: [false; NUM_LEGS],
            })
            .collect();
        Dataset {
            header,
            imu,
            leg,
            cam,
            gt,
        }
    }

    fn to_string(d: &Dataset) -> String {
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        let text = to_string(&d);
        let back = Dataset::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn shuffled_timestamps_are_reported() {
        let text = to_string(&tiny());
        let mut lines: Vec<&str> = text.lines().collect();
        // Swap the second and third IMU records.
        let imu_lines: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.contains("\"type\":\"imu\""))
            .map(|(i, _)| i)
            .collect();
        lines.swap(imu_lines[1], imu_lines[2]);
        let err = Dataset::read_from(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            Error::NonMonotone { stream, line, .. } => {
                assert_eq!(stream, "imu");
                assert_eq!(line, imu_lines[2] + 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let text = to_string(&tiny()).replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert!(matches!(
            Dataset::read_from(text.as_bytes()),
            Err(Error::SchemaVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn missing_streams_and_rates() {
        let text = to_string(&tiny());
        let no_gt: String = text
            .lines()
            .filter(|l| !l.contains("\"type\":\"gt\""))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(Dataset::read_from(no_gt.as_bytes()), Err(Error::MissingStream("gt"))));
        let no_cam: String = text
            .lines()
            .filter(|l| !l.contains("\"type\":\"cam\""))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(Dataset::read_from(no_cam.as_bytes()).unwrap().cam.is_empty());
        let wrong_rate = text.replacen("\"imu_rate\":500.0", "\"imu_rate\":400.0", 1);
        assert!(matches!(
            Dataset::read_from(wrong_rate.as_bytes()),
            Err(Error::RateMismatch { stream: "imu", .. })
        ));
        assert!(matches!(
            Dataset::read_from("{\"type\":\"imu\"".as_bytes()),
            Err(Error::Malformed { line: 1, .. })
        ));
    }
}
