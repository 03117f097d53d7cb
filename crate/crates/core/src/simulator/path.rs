//! Planar closed paths defined by their curvature profile, and the body
//! trajectory that follows them.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::UnitQuaternion;

/// First positive zero of the Bessel function J₀. A heading profile
/// `A·sin(2πs/L)` closes on itself exactly when `J₀(A) = 0`.
const J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    Circle { radius: f64 },
    /// Bounding box `length × width`; corners have raised-cosine curvature
    /// peaking at `1/corner_radius`.
    RoundedRect {
        length: f64,
        width: f64,
        corner_radius: f64,
    },
    /// Figure-eight of total arc length `length`.
    FigureEight { length: f64 },
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::RoundedRect {
            length: 19.0,
            width: 9.0,
            corner_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Straight { heading: f64 },
    Arc { heading: f64, curvature: f64 },
    /// Raised-cosine turn of `turn` radians over `len` metres.
    Turn { heading: f64, len: f64, turn: f64 },
    /// Heading `amp·sin(2πu/len)`.
    Sine { amp: f64, len: f64 },
}

impl Segment {
    fn heading(&self, u: f64) -> f64 {
        match *self {
            Segment::Straight { heading } => heading,
            Segment::Arc { heading, curvature } => heading + curvature * u,
            Segment::Turn { heading, len, turn } => {
                heading + turn * (u / len - (TAU * u / len).sin() / TAU)
            }
            Segment::Sine { amp, len } => amp * (TAU * u / len).sin(),
        }
    }

    fn curvature(&self, u: f64) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { curvature, .. } => curvature,
            Segment::Turn { len, turn, .. } => turn / len * (1.0 - (TAU * u / len).cos()),
            Segment::Sine { amp, len } => amp * TAU / len * (TAU * u / len).cos(),
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

const GL_ORDER: usize = 12;
const PANEL: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Path {
    pub spec: PathSpec,
    segments: Vec<(f64, Segment)>,
    /// Panel knots: arc length, segment index, position.
    knots: Vec<(f64, usize, Vector2<f64>)>,
    length: f64,
    gl: Vec<(f64, f64)>,
}

impl Path {
    pub fn new(spec: PathSpec) -> Result<Path> {
        let segments = match spec {
            PathSpec::Circle { radius } => {
                if !(radius > 0.0) {
                    return Err(Error::Config(format!("circle radius must be positive, got {radius}")));
                }
                vec![(
                    TAU * radius,
                    Segment::Arc {
                        heading: 0.0,
                        curvature: 1.0 / radius,
                    },
                )]
            }
            PathSpec::RoundedRect {
                length,
                width,
                corner_radius,
            } => {
                if !(corner_radius > 0.0) {
                    return Err(Error::Config("corner radius must be positive".into()));
                }
                let corner = PI * corner_radius;
                let d = corner_extent(corner);
                let (a, b) = (length - 2.0 * d, width - 2.0 * d);
                if a < 0.0 || b < 0.0 {
                    return Err(Error::Config(format!(
                        "rounded rectangle {length}x{width} too small for corner radius {corner_radius}"
                    )));
                }
                let mut segs = Vec::new();
                for k in 0..4 {
                    let heading = k as f64 * FRAC_PI_2;
                    let straight = if k % 2 == 0 { a } else { b };
                    if straight > 0.0 {
                        segs.push((straight, Segment::Straight { heading }));
                    }
                    segs.push((
                        corner,
                        Segment::Turn {
                            heading,
                            len: corner,
                            turn: FRAC_PI_2,
                        },
                    ));
                }
                segs
            }
            PathSpec::FigureEight { length } => {
                if !(length > 0.0) {
                    return Err(Error::Config("figure-eight length must be positive".into()));
                }
                vec![(length, Segment::Sine { amp: J0_FIRST_ZERO, len: length })]
            }
        };
        let mut path = Path {
            spec,
            segments,
            knots: Vec::new(),
            length: 0.0,
            gl: gauss_legendre(GL_ORDER),
        };
        let mut s0 = 0.0;
        let mut pos = Vector2::zeros();
        for (idx, (len, seg)) in path.segments.iter().enumerate() {
            let panels = (len / PANEL).ceil().max(1.0) as usize;
            let h = len / panels as f64;
            for k in 0..panels {
                path.knots.push((s0 + k as f64 * h, idx, pos));
                pos += path.integrate(seg, k as f64 * h, (k + 1) as f64 * h);
            }
            s0 += len;
        }
        path.length = s0;
        Ok(path)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    fn integrate(&self, seg: &Segment, u0: f64, u1: f64) -> Vector2<f64> {
        let (mid, half) = (0.5 * (u0 + u1), 0.5 * (u1 - u0));
        let mut acc = Vector2::zeros();
        for (x, w) in &self.gl {
            let psi = seg.heading(mid + half * x);
            acc += *w * Vector2::new(psi.cos(), psi.sin());
        }
        acc * half
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length);
        let k = self.knots.partition_point(|(ks, _, _)| *ks <= s).saturating_sub(1);
        (k, s)
    }

    fn segment_start(&self, idx: usize) -> f64 {
        self.segments[..idx].iter().map(|(l, _)| l).sum()
    }

    /// Position, heading and curvature at arc length `s` (wrapped).
    pub fn evaluate(&self, s: f64) -> (Vector2<f64>, f64, f64) {
        let (k, s) = self.locate(s);
        let (ks, idx, kpos) = self.knots[k];
        let seg = &self.segments[idx].1;
        let base = self.segment_start(idx);
        let pos = kpos + self.integrate(seg, ks - base, s - base);
        (pos, seg.heading(s - base), seg.curvature(s - base))
    }
}

/// Along-track and cross-track extent of a quarter turn of length `len`.
fn corner_extent(len: f64) -> f64 {
    let seg = Segment::Turn {
        heading: 0.0,
        len,
        turn: FRAC_PI_2,
    };
    let gl = gauss_legendre(GL_ORDER);
    let panels = (len / PANEL).ceil().max(1.0) as usize;
    let h = len / panels as f64;
    let mut x = 0.0;
    for k in 0..panels {
        let (mid, half) = ((k as f64 + 0.5) * h, 0.5 * h);
        for (n, w) in &gl {
            x += w * half * seg.heading(mid + half * n).cos();
        }
    }
    x
}

/// Body pose and derivatives at one instant.
#[derive(Debug, Clone, Copy)]
pub struct BodyState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub q: UnitQuaternion,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
    pub yaw: f64,
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub path: Path,
    pub speed: f64,
    /// Raised-cosine speed ramp from rest at the start, seconds.
    pub ramp: f64,
    pub duration: f64,
    pub height: f64,
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
    /// Amplitude of the zero-mean forward speed oscillation, m/s.
    pub ripple: f64,
    pub ripple_frequency: f64,
}

/// Quintic smoothstep on [0, 1] and its first two derivatives.
fn smoothstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let x2 = x * x;
    (
        x2 * x * (10.0 - 15.0 * x + 6.0 * x2),
        30.0 * x2 * (1.0 - x) * (1.0 - x),
        60.0 * x * (1.0 - x) * (1.0 - 2.0 * x),
    )
}

impl Trajectory {
    /// Offset added to the arc length by the speed ripple. Faded in and out
    /// over one second so it vanishes at both ends of the cruise.
    fn ripple_offset(&self, t: f64) -> (f64, f64, f64) {
        let (t0, t1) = (self.ramp, self.duration);
        let fade = 1.0;
        if self.ripple == 0.0 || self.ripple_frequency <= 0.0 || t1 - t0 < 2.0 * fade || t <= t0 || t >= t1 {
            return (0.0, 0.0, 0.0);
        }
        let (a, ad, add) = smoothstep((t - t0) / fade);
        let (b, bd, bdd) = smoothstep((t1 - t) / fade);
        let (e, ed, edd) = (a * b, (ad * b - a * bd) / fade, (add * b - 2.0 * ad * bd + a * bdd) / (fade * fade));
        let w = TAU * self.ripple_frequency;
        let (sn, cs) = (w * (t - t0)).sin_cos();
        let k = self.ripple / w;
        (
            k * e * sn,
            k * (ed * sn + e * w * cs),
            k * (edd * sn + 2.0 * ed * w * cs - e * w * w * sn),
        )
    }

    /// Arc length, speed and tangential acceleration at `t`.
    pub fn arclength(&self, t: f64) -> (f64, f64, f64) {
        let (s, sd, sdd) = self.base_arclength(t);
        let (r, rd, rdd) = self.ripple_offset(t);
        (s + r, sd + rd, sdd + rdd)
    }

    fn base_arclength(&self, t: f64) -> (f64, f64, f64) {
        let (v, tr) = (self.speed, self.ramp);
        if tr <= 0.0 {
            return (v * t, v, 0.0);
        }
        if t <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if t < tr {
            let w = PI / tr;
            (
                v * (0.5 * t - (w * t).sin() / (2.0 * w)),
                0.5 * v * (1.0 - (w * t).cos()),
                0.5 * v * w * (w * t).sin(),
            )
        } else {
            (v * (t - 0.5 * tr), v, 0.0)
        }
    }

    /// Total arc length travelled by `duration`.
    pub fn travelled(&self) -> f64 {
        self.arclength(self.duration).0
    }

    pub fn pitch(&self, t: f64) -> (f64, f64) {
        if self.pitch_amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let w = TAU * self.pitch_frequency;
        (self.pitch_amplitude * (w * t).sin(), self.pitch_amplitude * w * (w * t).cos())
    }

    pub fn body(&self, t: f64) -> BodyState {
        let (s, sd, sdd) = self.arclength(t);
        let (xy, yaw, kappa) = self.path.evaluate(s);
        let tangent = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let normal = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let yaw_rate = kappa * sd;
        let (pitch, pitch_rate) = self.pitch(t);
        let q = UnitQuaternion::from_yaw_pitch_roll(yaw, pitch, 0.0);
        // ω_body = R_y(θ)ᵀ·[0, 0, ψ̇] + [0, θ̇, 0]
        let omega = Vector3::new(-pitch.sin() * yaw_rate, pitch_rate, pitch.cos() * yaw_rate);
        BodyState {
            p: Vector3::new(xy.x, xy.y, self.height),
            v: tangent * sd,
            a: tangent * sdd + normal * (kappa * sd * sd),
            q,
            omega,
            yaw,
            s,
        }
    }
}
