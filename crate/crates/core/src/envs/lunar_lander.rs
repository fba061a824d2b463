//! Planar rigid-body lander with four discrete actions.
//!
//! State is `(x, y, vx, vy, angle, angular_velocity)`. Integration is
//! semi-implicit Euler: velocities first, then positions from the new
//! velocities. The main engine pushes along the body axis; side engines add
//! torque and a small lateral body-frame force. Firing `left` pushes the
//! lander towards `+x` and rolls it clockwise.

use std::f64::consts::{FRAC_PI_2, PI};

use super::{EnvError, StepResult};

pub const DT: f64 = 0.02;
pub const GRAVITY: f64 = 1.0;
pub const MAIN_THRUST: f64 = 3.0;
pub const SIDE_TORQUE: f64 = 3.0;
pub const SIDE_THRUST: f64 = 0.3;
pub const MAX_EPISODE_STEPS: usize = 500;

pub const NOOP: usize = 0;
pub const LEFT: usize = 1;
pub const MAIN: usize = 2;
pub const RIGHT: usize = 3;
pub const N_ACTIONS: usize = 4;

pub const X_LIMIT: f64 = 1.5;
pub const SOFT_VERTICAL_SPEED: f64 = 0.5;
pub const SOFT_ANGLE: f64 = 0.2;
pub const LANDING_BONUS: f64 = 100.0;
pub const CRASH_PENALTY: f64 = 100.0;
pub const SHAPING_SCALE: f64 = 10.0;

pub const START_HEIGHT: f64 = 1.2;

pub const LOWER: [f64; 6] = [-2.0, -0.5, -5.0, -5.0, -PI, -5.0];
pub const UPPER: [f64; 6] = [2.0, 3.0, 5.0, 5.0, PI, 5.0];

pub(crate) fn check_state(state: &[f64]) -> Result<(), EnvError> {
    if state.len() != 6 {
        return Err(EnvError::StateDimension {
            expected: 6,
            found: state.len(),
        });
    }
    if let Some(v) = state.iter().find(|v| !v.is_finite()) {
        return Err(EnvError::InvalidState(format!("non-finite lander state entry {v}")));
    }
    Ok(())
}

pub fn step(state: &[f64], action: usize) -> Result<StepResult, EnvError> {
    check_state(state)?;
    if action >= N_ACTIONS {
        return Err(EnvError::InvalidAction(format!(
            "lander action {action} not in 0..{N_ACTIONS}"
        )));
    }
    let [x, y, vx, vy, angle, omega] = [state[0], state[1], state[2], state[3], state[4], state[5]];
    let main = if action == MAIN { 1.0 } else { 0.0 };
    let side = match action {
        LEFT => 1.0,
        RIGHT => -1.0,
        _ => 0.0,
    };
    let (sin, cos) = (angle.sin(), angle.cos());
    let ax = -sin * MAIN_THRUST * main + SIDE_THRUST * cos * side;
    let ay = -GRAVITY + cos * MAIN_THRUST * main + SIDE_THRUST * sin * side;
    let alpha = -SIDE_TORQUE * side;
    let vx = vx + ax * DT;
    let vy = vy + ay * DT;
    let omega = omega + alpha * DT;
    let next = enforce_bounds(&[x + vx * DT, y + vy * DT, vx, vy, angle + omega * DT, omega]);
    let (reward, terminated) = outcome(state, &next);
    Ok(StepResult {
        next_state: next,
        reward,
        terminated,
        truncated: false,
    })
}

pub(crate) fn enforce_bounds(proposed: &[f64]) -> Vec<f64> {
    proposed
        .iter()
        .zip(LOWER.iter().zip(UPPER.iter()))
        .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
        .collect()
}

fn shaping(s: &[f64]) -> f64 {
    let distance = (s[0] * s[0] + s[1] * s[1]).sqrt();
    let speed = (s[2] * s[2] + s[3] * s[3]).sqrt();
    -SHAPING_SCALE * (distance + speed + s[4].abs())
}

pub(crate) fn touched_down(next: &[f64]) -> bool {
    next[1] <= 0.0
}

pub fn is_soft_landing(next: &[f64]) -> bool {
    touched_down(next) && next[3].abs() < SOFT_VERTICAL_SPEED && next[4].abs() < SOFT_ANGLE
}

pub(crate) fn outcome(state: &[f64], next: &[f64]) -> (f64, bool) {
    let terminated = touched_down(next) || next[0].abs() > X_LIMIT || next[4].abs() > FRAC_PI_2;
    let mut reward = shaping(next) - shaping(state);
    if terminated {
        if is_soft_landing(next) {
            reward += LANDING_BONUS;
        } else {
            reward -= CRASH_PENALTY;
        }
    }
    (reward, terminated)
}
