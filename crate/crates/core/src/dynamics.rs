//! Unicycle vehicle dynamics and its reverse-mode derivative.
//!
//! Integration is semi-implicit Euler: speed and heading are updated first,
//! then position moves along the new heading with the new speed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{normalize_angle, Action, AgentState, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state or action for agent {agent} at step {step}")]
    NonFiniteState { agent: usize, step: usize },
    #[error("time step must be positive and finite, got {0}")]
    BadTimestep(f64),
    #[error("action rows have {found} agents, expected {expected} (step {step})")]
    Shape {
        step: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Acceleration bound, m/s^2.
    pub a_max: f64,
    /// Yaw-rate bound, rad/s.
    pub r_max: f64,
    /// Allow negative speeds (reversing). Off by default.
    pub allow_reverse: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            a_max: 6.0,
            r_max: 1.0,
            allow_reverse: false,
        }
    }
}

impl DynamicsConfig {
    pub fn clamp(&self, action: Action) -> Action {
        Action {
            accel: action.accel.clamp(-self.a_max, self.a_max),
            yaw_rate: action.yaw_rate.clamp(-self.r_max, self.r_max),
        }
    }
}

/// Advance one agent by one step of length `dt`.
pub fn step_unicycle(
    state: &AgentState,
    action: &Action,
    dt: f64,
    cfg: &DynamicsConfig,
) -> Result<AgentState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadTimestep(dt));
    }
    if !state.is_finite() || !action.accel.is_finite() || !action.yaw_rate.is_finite() {
        return Err(DynamicsError::NonFiniteState { agent: 0, step: 0 });
    }
    Ok(integrate(state, &cfg.clamp(*action), dt, cfg))
}

fn integrate(s: &AgentState, a: &Action, dt: f64, cfg: &DynamicsConfig) -> AgentState {
    let raw_speed = s.speed + a.accel * dt;
    let speed = if cfg.allow_reverse {
        raw_speed
    } else {
        raw_speed.max(0.0)
    };
    let heading = normalize_angle(s.heading + a.yaw_rate * dt);
    AgentState {
        x: s.x + speed * heading.cos() * dt,
        y: s.y + speed * heading.sin() * dt,
        heading,
        speed,
        length: s.length,
        width: s.width,
    }
}

/// Roll all agents forward under `actions[t][agent]`.
///
/// The stored actions are the clamped ones actually applied, so the result
/// satisfies the trajectory feasibility invariant exactly.
pub fn rollout(
    initial: &[AgentState],
    actions: &[Vec<Action>],
    dt: f64,
    cfg: &DynamicsConfig,
) -> Result<Trajectory, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadTimestep(dt));
    }
    let n = initial.len();
    for (agent, s) in initial.iter().enumerate() {
        if !s.is_finite() {
            return Err(DynamicsError::NonFiniteState { agent, step: 0 });
        }
    }
    let mut states = Vec::with_capacity(actions.len() + 1);
    let mut applied = Vec::with_capacity(actions.len());
    states.push(initial.to_vec());
    for (step, row) in actions.iter().enumerate() {
        if row.len() != n {
            return Err(DynamicsError::Shape {
                step,
                expected: n,
                found: row.len(),
            });
        }
        let prev = &states[step];
        let mut next = Vec::with_capacity(n);
        let mut used = Vec::with_capacity(n);
        for (agent, (s, a)) in prev.iter().zip(row).enumerate() {
            if !a.accel.is_finite() || !a.yaw_rate.is_finite() {
                return Err(DynamicsError::NonFiniteState { agent, step });
            }
            let a = cfg.clamp(*a);
            let s1 = integrate(s, &a, dt, cfg);
            if !s1.is_finite() {
                return Err(DynamicsError::NonFiniteState {
                    agent,
                    step: step + 1,
                });
            }
            next.push(s1);
            used.push(a);
        }
        states.push(next);
        applied.push(used);
    }
    Ok(Trajectory {
        states,
        actions: applied,
        dt,
    })
}

/// Adjoint of one agent state with respect to `(x, y, heading, speed)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateGrad {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// Reverse-mode derivative of [`rollout`].
///
/// `raw_actions` are the unclamped inputs that produced `traj`; `state_grads[t][i]`
/// is dJ/d`traj.states[t][i]` for `t` in `0..=T` (row 0 is ignored, the initial
/// state is a constant). Returns dJ/d`raw_actions` with shape `[T][N]` as
/// `[d_accel, d_yaw_rate]`. Gradients through an active clamp or the speed
/// floor are zero.
pub fn rollout_vjp(
    traj: &Trajectory,
    raw_actions: &[Vec<Action>],
    state_grads: &[Vec<StateGrad>],
    cfg: &DynamicsConfig,
) -> Vec<Vec<[f64; 2]>> {
    let horizon = traj.horizon();
    let n = traj.num_agents();
    let dt = traj.dt;
    let mut out = vec![vec![[0.0; 2]; n]; horizon];
    for i in 0..n {
        // adjoint of states[t+1], carried backwards
        let mut carry = StateGrad::default();
        for t in (0..horizon).rev() {
            let g_in = state_grads[t + 1][i];
            let g = StateGrad {
                x: carry.x + g_in.x,
                y: carry.y + g_in.y,
                heading: carry.heading + g_in.heading,
                speed: carry.speed + g_in.speed,
            };
            let next = &traj.states[t + 1][i];
            let prev = &traj.states[t][i];
            let (sin_h, cos_h) = next.heading.sin_cos();
            let g_speed = g.speed + (g.x * cos_h + g.y * sin_h) * dt;
            let g_heading =
                g.heading + (-g.x * next.speed * sin_h + g.y * next.speed * cos_h) * dt;

            let raw = raw_actions[t][i];
            let applied = traj.actions[t][i];
            let floored = !cfg.allow_reverse && prev.speed + applied.accel * dt < 0.0;
            let (g_prev_speed, g_accel) = if floored {
                (0.0, 0.0)
            } else {
                (g_speed, g_speed * dt)
            };
            let g_yaw = g_heading * dt;
            out[t][i] = [
                if raw.accel.abs() < cfg.a_max { g_accel } else { 0.0 },
                if raw.yaw_rate.abs() < cfg.r_max { g_yaw } else { 0.0 },
            ];
            carry = StateGrad {
                x: g.x,
                y: g.y,
                heading: g_heading,
                speed: g_prev_speed,
            };
        }
    }
    out
}
