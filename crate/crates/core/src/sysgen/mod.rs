//! Simulated benchmark systems, their observations, and dataset assembly.

mod dataset;
mod embed;
mod render;

pub use dataset::{build_dataset, Dataset, DatasetConfig, ObservationMode, ObservationPair, Splits};
pub use embed::{embed_state, EmbeddingSpec};
pub use render::{render_frame, RenderGeometry};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    CircularMotion,
    SinglePendulum,
    DoublePendulum,
    ElasticPendulum,
}

impl SystemKind {
    /// Number of state variables (the ground-truth intrinsic dimension).
    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => 2,
            SystemKind::DoublePendulum => 4,
            SystemKind::ElasticPendulum => 6,
        }
    }

    /// Indices of state components that are angles.
    pub fn angle_indices(self) -> &'static [usize] {
        match self {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => &[0],
            SystemKind::DoublePendulum | SystemKind::ElasticPendulum => &[0, 2],
        }
    }

    /// Column names of the state vector.
    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => &["theta", "omega"],
            SystemKind::DoublePendulum => &["theta1", "omega1", "theta2", "omega2"],
            SystemKind::ElasticPendulum => &["theta1", "omega1", "theta2", "omega2", "r", "r_dot"],
        }
    }
}

fn default_gravity() -> f64 {
    9.81
}
fn one() -> f64 {
    1.0
}
fn default_spring() -> f64 {
    50.0
}
fn default_speed() -> f64 {
    2.0
}
fn default_amplitude() -> f64 {
    0.9
}

/// Physical parameters of a simulated system.
///
/// Units: lengths in metres, masses in kilograms, time in seconds. Angles
/// are measured from the downward vertical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub kind: SystemKind,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "one")]
    pub length1: f64,
    #[serde(default = "one")]
    pub length2: f64,
    #[serde(default = "one")]
    pub mass1: f64,
    #[serde(default = "one")]
    pub mass2: f64,
    #[serde(default = "default_spring")]
    pub spring_constant: f64,
    #[serde(default = "one")]
    pub rest_length: f64,
    /// Circular motion only: angular speed in rad/s.
    #[serde(default = "default_speed")]
    pub angular_speed: f64,
    /// Circular motion only: per-trajectory speeds are drawn uniformly from
    /// `angular_speed ± angular_speed_spread`. Zero keeps every trajectory
    /// at exactly `angular_speed`.
    #[serde(default)]
    pub angular_speed_spread: f64,
    /// Initial angles are drawn from `[-pi * amplitude, pi * amplitude]`.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Initial velocities are drawn from `[-max_velocity, max_velocity]`.
    #[serde(default = "one")]
    pub max_velocity: f64,
}

impl SystemSpec {
    pub fn new(kind: SystemKind) -> Self {
        Self {
            kind,
            gravity: default_gravity(),
            length1: 1.0,
            length2: 1.0,
            mass1: 1.0,
            mass2: 1.0,
            spring_constant: default_spring(),
            rest_length: 1.0,
            angular_speed: default_speed(),
            angular_speed_spread: 0.0,
            amplitude: default_amplitude(),
            max_velocity: 1.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gravity", self.gravity),
            ("length1", self.length1),
            ("length2", self.length2),
            ("mass1", self.mass1),
            ("mass2", self.mass2),
            ("spring_constant", self.spring_constant),
            ("rest_length", self.rest_length),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let nonneg = [
            ("angular_speed_spread", self.angular_speed_spread),
            ("amplitude", self.amplitude),
            ("max_velocity", self.max_velocity),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.angular_speed.is_finite() {
            return Err(Error::Config("angular_speed must be finite".into()));
        }
        Ok(())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        Ok(())
    }

    /// Largest distance from the pivot any drawn body can reach.
    pub fn reach(&self) -> f64 {
        match self.kind {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => self.length1,
            SystemKind::DoublePendulum => self.length1 + self.length2,
            SystemKind::ElasticPendulum => self.length1 + 1.6 * self.rest_length,
        }
    }
}

/// Ground-truth state sequence sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub system: SystemSpec,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draws an initial state within the spec's configured ranges.
pub fn sample_initial<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Vec<f64> {
    let amp = PI * spec.amplitude;
    let vmax = spec.max_velocity;
    let angle = |rng: &mut R| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
    let velocity = |rng: &mut R| if vmax > 0.0 { rng.random_range(-vmax..=vmax) } else { 0.0 };
    match spec.kind {
        SystemKind::CircularMotion => {
            let theta = angle(rng);
            let spread = spec.angular_speed_spread;
            let omega = if spread > 0.0 {
                spec.angular_speed + rng.random_range(-spread..=spread)
            } else {
                spec.angular_speed
            };
            vec![theta, omega]
        }
        SystemKind::SinglePendulum => {
            let theta = angle(rng);
            vec![theta, velocity(rng)]
        }
        SystemKind::DoublePendulum => {
            let t1 = angle(rng);
            let w1 = velocity(rng);
            let t2 = angle(rng);
            let w2 = velocity(rng);
            vec![t1, w1, t2, w2]
        }
        SystemKind::ElasticPendulum => {
            let t1 = angle(rng);
            let w1 = velocity(rng);
            let t2 = angle(rng);
            let w2 = velocity(rng);
            let half = 0.5 * spec.rest_length;
            let r = rng.random_range(-half..=half);
            let rdot = velocity(rng);
            vec![t1, w1, t2, w2, r, rdot]
        }
    }
}

/// Solves the 3x3 system `m x = f` by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut f: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap_or(col);
        m.swap(col, pivot);
        f.swap(col, pivot);
        for row in col + 1..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= factor * m[col][k];
            }
            f[row] -= factor * f[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = f[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}

/// Time derivative of the state under the system's equations of motion.
pub fn derivative(spec: &SystemSpec, s: &[f64], out: &mut [f64]) {
    let g = spec.gravity;
    match spec.kind {
        SystemKind::CircularMotion => {
            out[0] = s[1];
            out[1] = 0.0;
        }
        SystemKind::SinglePendulum => {
            out[0] = s[1];
            out[1] = -(g / spec.length1) * s[0].sin();
        }
        SystemKind::DoublePendulum => {
            let (m1, m2, l1, l2) = (spec.mass1, spec.mass2, spec.length1, spec.length2);
            let (t1, w1, t2, w2) = (s[0], s[1], s[2], s[3]);
            let delta = t2 - t1;
            let (sd, cd) = delta.sin_cos();
            let a11 = (m1 + m2) * l1 * l1;
            let a12 = m2 * l1 * l2 * cd;
            let a22 = m2 * l2 * l2;
            let f1 = m2 * l1 * l2 * w2 * w2 * sd - (m1 + m2) * g * l1 * t1.sin();
            let f2 = -m2 * l1 * l2 * w1 * w1 * sd - m2 * g * l2 * t2.sin();
            let det = a11 * a22 - a12 * a12;
            out[0] = w1;
            out[1] = (f1 * a22 - a12 * f2) / det;
            out[2] = w2;
            out[3] = (a11 * f2 - a12 * f1) / det;
        }
        SystemKind::ElasticPendulum => {
            // Generalized coordinates (theta1, theta2, r); the second link is
            // a Hooke spring of length rest_length + r.
            let (m1, m2, l1, k) = (spec.mass1, spec.mass2, spec.length1, spec.spring_constant);
            let (t1, w1, t2, w2, r, rd) = (s[0], s[1], s[2], s[3], s[4], s[5]);
            let ell = spec.rest_length + r;
            let delta = t2 - t1;
            let (sd, cd) = delta.sin_cos();
            let mass = [
                [(m1 + m2) * l1 * l1, m2 * l1 * ell * cd, m2 * l1 * sd],
                [m2 * l1 * ell * cd, m2 * ell * ell, 0.0],
                [m2 * l1 * sd, 0.0, m2],
            ];
            let force = [
                -2.0 * m2 * l1 * rd * w2 * cd + m2 * l1 * ell * w2 * w2 * sd
                    - (m1 + m2) * g * l1 * t1.sin(),
                -2.0 * m2 * ell * rd * w2 - m2 * l1 * ell * w1 * w1 * sd - m2 * g * ell * t2.sin(),
                m2 * l1 * w1 * w1 * cd + m2 * ell * w2 * w2 + m2 * g * t2.cos() - k * r,
            ];
            let acc = solve3(mass, force);
            out[0] = w1;
            out[1] = acc[0];
            out[2] = w2;
            out[3] = acc[1];
            out[4] = rd;
            out[5] = acc[2];
        }
    }
}

fn rk4_step(spec: &SystemSpec, s: &mut [f64], h: f64, scratch: &mut [Vec<f64>; 5]) {
    let n = s.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    derivative(spec, s, k1);
    for i in 0..n {
        tmp[i] = s[i] + 0.5 * h * k1[i];
    }
    derivative(spec, tmp, k2);
    for i in 0..n {
        tmp[i] = s[i] + 0.5 * h * k2[i];
    }
    derivative(spec, tmp, k3);
    for i in 0..n {
        tmp[i] = s[i] + h * k3[i];
    }
    derivative(spec, tmp, k4);
    for i in 0..n {
        s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Internal RK4 substeps per output interval.
pub const SUBSTEPS: usize = 10;

/// Integrates `steps` states (including `init`) spaced `dt` apart with
/// classical RK4 at `dt / SUBSTEPS`. Angles are never wrapped.
pub fn simulate(spec: &SystemSpec, init: &[f64], dt: f64, steps: usize) -> Result<StateTrajectory> {
    simulate_with_substeps(spec, init, dt, steps, SUBSTEPS)
}

pub fn simulate_with_substeps(
    spec: &SystemSpec,
    init: &[f64],
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<StateTrajectory> {
    spec.validate()?;
    spec.check_state(init)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if steps < 2 {
        return Err(Error::Config(format!("need at least 2 steps, got {steps}")));
    }
    if substeps < SUBSTEPS {
        return Err(Error::Config(format!("at least {SUBSTEPS} substeps required")));
    }
    let n = init.len();
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let h = dt / substeps as f64;
    let mut s = init.to_vec();
    let mut states = Vec::with_capacity(steps);
    states.push(s.clone());
    for step in 1..steps {
        for _ in 0..substeps {
            rk4_step(spec, &mut s, h, &mut scratch);
        }
        if let Some(component) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step, component });
        }
        states.push(s.clone());
    }
    Ok(StateTrajectory {
        system: spec.clone(),
        dt,
        states,
    })
}

/// Total mechanical energy (kinetic + gravitational + elastic), with the
/// gravitational reference at the pivot height.
pub fn energy(spec: &SystemSpec, s: &[f64]) -> Result<f64> {
    spec.check_state(s)?;
    let g = spec.gravity;
    let (m1, m2, l1, l2) = (spec.mass1, spec.mass2, spec.length1, spec.length2);
    let e = match spec.kind {
        SystemKind::CircularMotion => 0.5 * m1 * (l1 * s[1]).powi(2),
        SystemKind::SinglePendulum => 0.5 * m1 * (l1 * s[1]).powi(2) - m1 * g * l1 * s[0].cos(),
        SystemKind::DoublePendulum => {
            let (t1, w1, t2, w2) = (s[0], s[1], s[2], s[3]);
            let kinetic = 0.5 * (m1 + m2) * (l1 * w1).powi(2)
                + 0.5 * m2 * (l2 * w2).powi(2)
                + m2 * l1 * l2 * w1 * w2 * (t1 - t2).cos();
            let potential = -(m1 + m2) * g * l1 * t1.cos() - m2 * g * l2 * t2.cos();
            kinetic + potential
        }
        SystemKind::ElasticPendulum => {
            let (t1, w1, t2, w2, r, rd) = (s[0], s[1], s[2], s[3], s[4], s[5]);
            let ell = spec.rest_length + r;
            let delta = t2 - t1;
            let v2 = (l1 * w1).powi(2)
                + rd * rd
                + (ell * w2).powi(2)
                + 2.0 * l1 * w1 * rd * delta.sin()
                + 2.0 * l1 * ell * w1 * w2 * delta.cos();
            let kinetic = 0.5 * m1 * (l1 * w1).powi(2) + 0.5 * m2 * v2;
            let potential = -(m1 + m2) * g * l1 * t1.cos() - m2 * g * ell * t2.cos()
                + 0.5 * spec.spring_constant * r * r;
            kinetic + potential
        }
    };
    Ok(e)
}
