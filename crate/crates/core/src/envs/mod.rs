//! Ground-truth environments with closed-form dynamics.
//!
//! All three systems step with a fixed `dt` and take actions in the
//! normalized cube `[-1, 1]^action_dim`; [`denormalize_action`] maps them to
//! native units before the dynamics see them.

use std::f64::consts::PI;
use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

mod instrumented;
pub use instrumented::{Accounting, RealEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Pendulum,
    Cartpole,
    PointHopper,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::Pendulum, EnvId::Cartpole, EnvId::PointHopper];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Pendulum => "pendulum",
            EnvId::Cartpole => "cartpole",
            EnvId::PointHopper => "point_hopper",
        }
    }

    pub fn descriptor(self) -> EnvDescriptor {
        match self {
            EnvId::Pendulum => EnvDescriptor {
                env_id: self,
                state_dim: 3,
                action_dim: 1,
                native_action_low: vec![-pendulum::MAX_TORQUE],
                native_action_high: vec![pendulum::MAX_TORQUE],
                dt: pendulum::DT,
            },
            EnvId::Cartpole => EnvDescriptor {
                env_id: self,
                state_dim: 5,
                action_dim: 1,
                native_action_low: vec![-cartpole::MAX_FORCE],
                native_action_high: vec![cartpole::MAX_FORCE],
                dt: cartpole::DT,
            },
            EnvId::PointHopper => EnvDescriptor {
                env_id: self,
                state_dim: 4,
                action_dim: 2,
                native_action_low: vec![-hopper::MAX_ACTION; 2],
                native_action_high: vec![hopper::MAX_ACTION; 2],
                dt: hopper::DT,
            },
        }
    }

    /// Column names of the state vector.
    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            EnvId::Pendulum => &["cos_theta", "sin_theta", "theta_dot"],
            EnvId::Cartpole => &["x", "x_dot", "cos_theta", "sin_theta", "theta_dot"],
            EnvId::PointHopper => &["z", "x_dot", "z_dot", "contact"],
        }
    }

    pub fn action_names(self) -> &'static [&'static str] {
        match self {
            EnvId::Pendulum => &["torque"],
            EnvId::Cartpole => &["force"],
            EnvId::PointHopper => &["lean", "push"],
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvId::Pendulum),
            "cartpole" => Ok(EnvId::Cartpole),
            "point_hopper" | "hopper" => Ok(EnvId::PointHopper),
            other => Err(Error::Config(format!(
                "unknown environment {other:?} (expected pendulum, cartpole or point_hopper)"
            ))),
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub env_id: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub native_action_low: Vec<f64>,
    pub native_action_high: Vec<f64>,
    pub dt: f64,
}

/// State vector; the layout depends on the environment (see [`EnvId::state_names`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState(pub Vec<f64>);

impl Deref for EnvState {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Action in normalized units, every component in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action(pub Vec<f64>);

impl Deref for Action {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Action {
    pub fn zeros(dim: usize) -> Self {
        Action(vec![0.0; dim])
    }
}

static CLIP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of out-of-range inputs clipped by the action maps so far.
pub fn action_clip_warnings() -> u64 {
    CLIP_WARNINGS.load(Ordering::Relaxed)
}

fn clip_counted(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo || v > hi || v.is_nan() {
        CLIP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        if v.is_nan() {
            return 0.5 * (lo + hi);
        }
        v.clamp(lo, hi)
    } else {
        v
    }
}

/// Affine map from the native range onto `[-1, 1]`.
pub fn normalize_action(desc: &EnvDescriptor, native: &[f64]) -> Action {
    Action(
        native
            .iter()
            .zip(desc.native_action_low.iter().zip(&desc.native_action_high))
            .map(|(&x, (&lo, &hi))| {
                let x = clip_counted(x, lo, hi);
                (2.0 * x - (lo + hi)) / (hi - lo)
            })
            .collect(),
    )
}

/// Inverse of [`normalize_action`].
pub fn denormalize_action(desc: &EnvDescriptor, a: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(desc.native_action_low.iter().zip(&desc.native_action_high))
        .map(|(&a, (&lo, &hi))| {
            let a = clip_counted(a, -1.0, 1.0);
            0.5 * (a * (hi - lo) + (lo + hi))
        })
        .collect()
}

/// Angle in `[-π, π]` from its cosine and sine.
pub fn angle_of(cos: f64, sin: f64) -> f64 {
    sin.atan2(cos)
}

pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t < -PI {
        t += 2.0 * PI;
    }
    t
}

pub mod pendulum {
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;

    /// `θ̈ = 3g/(2l) sin θ + 3/(m l²) τ`, with `θ = 0` upright.
    pub fn angular_accel(theta: f64, torque: f64) -> f64 {
        3.0 * G / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * torque
    }

    /// Mechanical energy of the uniform rod about its pivot.
    pub fn energy(theta: f64, theta_dot: f64) -> f64 {
        let inertia = MASS * LENGTH * LENGTH / 3.0;
        0.5 * inertia * theta_dot * theta_dot + MASS * G * 0.5 * LENGTH * theta.cos()
    }
}

pub mod cartpole {
    pub const G: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    pub const HALF_LENGTH: f64 = 0.5;
    pub const DT: f64 = 0.02;
    pub const MAX_FORCE: f64 = 10.0;
    pub const X_LIMIT: f64 = 3.0;

    /// Returns `(ẍ, θ̈)` for the frictionless cart-pole, `θ = 0` upright.
    pub fn accelerations(theta: f64, theta_dot: f64, force: f64) -> (f64, f64) {
        let total = CART_MASS + POLE_MASS;
        let pml = POLE_MASS * HALF_LENGTH;
        let (s, c) = theta.sin_cos();
        let temp = (force + pml * theta_dot * theta_dot * s) / total;
        let theta_acc = (G * s - c * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * c * c / total));
        let x_acc = temp - pml * theta_acc * c / total;
        (x_acc, theta_acc)
    }
}

pub mod hopper {
    pub const G: f64 = 10.0;
    pub const DT: f64 = 0.05;
    pub const MAX_ACTION: f64 = 5.0;
    pub const GROUND_FRICTION: f64 = 0.7;
    pub const MAX_LEAN: f64 = std::f64::consts::FRAC_PI_4;
    pub const MAX_SPEED: f64 = 10.0;
    pub const RESET_JITTER: f64 = 0.05;

    pub const Z: usize = 0;
    pub const X_DOT: usize = 1;
    pub const Z_DOT: usize = 2;
    pub const CONTACT: usize = 3;
}

/// Initial state for `desc.env_id`, a deterministic function of `seed`.
pub fn env_reset(desc: &EnvDescriptor, seed: u64) -> EnvState {
    let mut r = rng::stream(seed, "env_reset");
    match desc.env_id {
        EnvId::Pendulum => {
            let theta: f64 = r.random_range(-PI..=PI);
            let theta_dot: f64 = r.random_range(-1.0..=1.0);
            EnvState(vec![theta.cos(), theta.sin(), theta_dot])
        }
        EnvId::Cartpole => {
            let x: f64 = r.random_range(-0.05..=0.05);
            let x_dot: f64 = r.random_range(-0.05..=0.05);
            let theta = PI + r.random_range(-0.05..=0.05);
            let theta_dot: f64 = r.random_range(-0.05..=0.05);
            EnvState(vec![x, x_dot, theta.cos(), theta.sin(), theta_dot])
        }
        EnvId::PointHopper => {
            let j = hopper::RESET_JITTER;
            let x_dot: f64 = r.random_range(-j..=j);
            let z_dot: f64 = r.random_range(-j..=j);
            EnvState(vec![0.0, x_dot, z_dot, 1.0])
        }
    }
}

fn check_dims(desc: &EnvDescriptor, s: &[f64], a: &[f64]) -> Result<()> {
    if s.len() != desc.state_dim || a.len() != desc.action_dim {
        return Err(Error::Shape {
            op: "env_step",
            detail: format!(
                "{} expects state {} / action {}, got {} / {}",
                desc.env_id,
                desc.state_dim,
                desc.action_dim,
                s.len(),
                a.len()
            ),
        });
    }
    Ok(())
}

/// One step of the ground-truth dynamics. Pure in `(s, a)`.
pub fn env_step(desc: &EnvDescriptor, s: &EnvState, a: &Action) -> Result<EnvState> {
    Ok(env_step_tracked(desc, s, a)?.0)
}

/// As [`env_step`], also returning the horizontal displacement for
/// environments that track a position outside the state vector.
pub fn env_step_tracked(desc: &EnvDescriptor, s: &EnvState, a: &Action) -> Result<(EnvState, f64)> {
    check_dims(desc, s, a)?;
    let native = denormalize_action(desc, a);
    let (next, dx) = match desc.env_id {
        EnvId::Pendulum => {
            let theta = angle_of(s[0], s[1]);
            let theta_dot = s[2];
            let acc = pendulum::angular_accel(theta, native[0]);
            let new_theta = theta + desc.dt * theta_dot;
            let new_dot = (theta_dot + desc.dt * acc).clamp(-pendulum::MAX_SPEED, pendulum::MAX_SPEED);
            (vec![new_theta.cos(), new_theta.sin(), new_dot], 0.0)
        }
        EnvId::Cartpole => {
            let (x, x_dot) = (s[0], s[1]);
            let theta = angle_of(s[2], s[3]);
            let theta_dot = s[4];
            let (x_acc, th_acc) = cartpole::accelerations(theta, theta_dot, native[0]);
            let mut nx = x + desc.dt * x_dot;
            let mut nx_dot = x_dot + desc.dt * x_acc;
            let nth = theta + desc.dt * theta_dot;
            let nth_dot = theta_dot + desc.dt * th_acc;
            if nx.abs() >= cartpole::X_LIMIT {
                nx = nx.clamp(-cartpole::X_LIMIT, cartpole::X_LIMIT);
                nx_dot = 0.0;
            }
            (vec![nx, nx_dot, nth.cos(), nth.sin(), nth_dot], nx - x)
        }
        EnvId::PointHopper => {
            use hopper::*;
            let (mut z, mut x_dot, mut z_dot) = (s[Z], s[X_DOT], s[Z_DOT]);
            if s[CONTACT] > 0.5 {
                x_dot *= GROUND_FRICTION;
                let push = native[1].max(0.0);
                let lean = native[0] / MAX_ACTION * MAX_LEAN;
                x_dot += push * lean.sin();
                z_dot += push * lean.cos();
            }
            z_dot -= desc.dt * G;
            x_dot = x_dot.clamp(-MAX_SPEED, MAX_SPEED);
            z_dot = z_dot.clamp(-MAX_SPEED, MAX_SPEED);
            z += desc.dt * z_dot;
            let dx = desc.dt * x_dot;
            let contact = if z <= 0.0 {
                z = 0.0;
                z_dot = 0.0;
                1.0
            } else {
                0.0
            };
            (vec![z, x_dot, z_dot, contact], dx)
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dynamics(format!("{} produced a non-finite state", desc.env_id)));
    }
    Ok((EnvState(next), dx))
}

#[cfg(test)]
mod tests;
