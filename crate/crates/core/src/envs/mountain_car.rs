//! Continuous-action Mountain Car with the published benchmark constants.

use super::{EnvError, StepResult};

pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.45;
pub const POWER: f64 = 0.0015;
pub const HILL: f64 = 0.0025;
pub const GOAL_REWARD: f64 = 100.0;
pub const ACTION_COST: f64 = 0.1;
pub const MAX_EPISODE_STEPS: usize = 999;

pub(crate) fn check_state(state: &[f64]) -> Result<(), EnvError> {
    if state.len() != 2 {
        return Err(EnvError::StateDimension {
            expected: 2,
            found: state.len(),
        });
    }
    let (p, v) = (state[0], state[1]);
    if !p.is_finite() || !v.is_finite() {
        return Err(EnvError::InvalidState(format!("non-finite state ({p}, {v})")));
    }
    if !(MIN_POSITION..=MAX_POSITION).contains(&p) || !(-MAX_SPEED..=MAX_SPEED).contains(&v) {
        return Err(EnvError::InvalidState(format!(
            "state ({p}, {v}) outside [{MIN_POSITION}, {MAX_POSITION}] × [-{MAX_SPEED}, {MAX_SPEED}]"
        )));
    }
    Ok(())
}

pub(crate) fn clamp_action(action: f64) -> Result<f64, EnvError> {
    if !action.is_finite() {
        return Err(EnvError::InvalidAction(format!("non-finite force {action}")));
    }
    Ok(action.clamp(-1.0, 1.0))
}

/// One step of the benchmark dynamics.
pub fn step(state: &[f64], action: f64) -> Result<StepResult, EnvError> {
    check_state(state)?;
    let force = clamp_action(action)?;
    let (position, velocity) = (state[0], state[1]);
    let mut v = velocity + force * POWER - HILL * (3.0 * position).cos();
    v = v.clamp(-MAX_SPEED, MAX_SPEED);
    let mut p = position + v;
    p = p.clamp(MIN_POSITION, MAX_POSITION);
    if p == MIN_POSITION && v < 0.0 {
        v = 0.0;
    }
    let next = vec![p, v];
    let (reward, terminated) = outcome(force, &next);
    Ok(StepResult {
        next_state: next,
        reward,
        terminated,
        truncated: false,
    })
}

pub(crate) fn outcome(force: f64, next: &[f64]) -> (f64, bool) {
    let terminated = next[0] >= GOAL_POSITION;
    let mut reward = -ACTION_COST * force * force;
    if terminated {
        reward += GOAL_REWARD;
    }
    (reward, terminated)
}

/// Applies the benchmark's boundary rules to an unconstrained proposal
/// `(p + v', v')`: speed limit (carried through to the position), position
/// limits and the inelastic left wall.
pub(crate) fn enforce_bounds(proposed: &[f64]) -> Vec<f64> {
    let (p_raw, v_raw) = (proposed[0], proposed[1]);
    let mut v = v_raw.clamp(-MAX_SPEED, MAX_SPEED);
    let mut p = if v == v_raw { p_raw } else { p_raw - (v_raw - v) };
    p = p.clamp(MIN_POSITION, MAX_POSITION);
    if p == MIN_POSITION && v < 0.0 {
        v = 0.0;
    }
    vec![p, v]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::manual_clamp)]
    // Straight transcription of the reference benchmark step.
    fn reference(p: f64, v: f64, a: f64) -> (f64, f64, bool, f64) {
        let force = a.max(-1.0).min(1.0);
        let mut velocity = v + force * 0.0015 - 0.0025 * (3.0 * p).cos();
        if velocity > 0.07 {
            velocity = 0.07;
        }
        if velocity < -0.07 {
            velocity = -0.07;
        }
        let mut position = p + velocity;
        if position > 0.6 {
            position = 0.6;
        }
        if position < -1.2 {
            position = -1.2;
        }
        if position == -1.2 && velocity < 0.0 {
            velocity = 0.0;
        }
        let done = position >= 0.45;
        let mut reward = 0.0;
        if done {
            reward = 100.0;
        }
        reward -= force * force * 0.1;
        (position, velocity, done, reward)
    }

    #[test]
    fn valley_step_from_rest() {
        let r = step(&[-0.5, 0.0], 0.0).unwrap();
        let dv = -0.0025 * (-1.5f64).cos();
        assert!((r.next_state[1] - dv).abs() < 1e-15);
        assert!((dv - (-1.7684e-4)).abs() < 1e-7);
        assert!((r.next_state[0] - (-0.5 + dv)).abs() < 1e-15);
        assert!(!r.terminated);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn reaching_the_goal_terminates() {
        let r = step(&[0.449, 0.07], 0.0).unwrap();
        assert!(r.next_state[0] >= 0.45);
        assert!(r.terminated);
        assert_eq!(r.reward, 100.0);
    }

    #[test]
    fn matches_reference_on_grid() {
        for i in 0..=36 {
            for j in 0..=28 {
                for a in [-1.0, -0.3, 0.0, 0.7, 1.0] {
                    let p = -1.2 + 0.05 * i as f64;
                    let v = -0.07 + 0.005 * j as f64;
                    let (p, v) = (p.min(0.6), v.min(0.07));
                    let r = step(&[p, v], a).unwrap();
                    let (rp, rv, done, rew) = reference(p, v, a);
                    assert_eq!(r.next_state, vec![rp, rv]);
                    assert_eq!(r.terminated, done);
                    assert_eq!(r.reward, rew);
                }
            }
        }
    }

    #[test]
    fn bound_enforcement_agrees_with_step() {
        for i in 0..=90 {
            for j in 0..=70 {
                for a in [-1.0, 0.0, 1.0] {
                    let p = -1.2 + 0.02 * i as f64;
                    let v = -0.07 + 0.002 * j as f64;
                    let (p, v) = (p.min(0.6), v.min(0.07));
                    let v_raw = v + a * POWER - HILL * (3.0 * p).cos();
                    let constrained = enforce_bounds(&[p + v_raw, v_raw]);
                    let r = step(&[p, v], a).unwrap();
                    assert!((constrained[0] - r.next_state[0]).abs() <= 1e-12);
                    assert!((constrained[1] - r.next_state[1]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_states() {
        assert!(step(&[0.7, 0.0], 0.0).is_err());
        assert!(step(&[0.0, f64::NAN], 0.0).is_err());
        assert!(step(&[0.0, 0.0], f64::INFINITY).is_err());
    }
}
