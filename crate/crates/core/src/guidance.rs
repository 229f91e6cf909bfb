//! Differentiable scenario costs and the masked cost-gradient update applied
//! during reverse diffusion.
//!
//! Costs are functions of the rolled-out states; their gradients reach the
//! actions through [`rollout_vjp`], so updated actions stay dynamics-feasible.
//! The update descends `J = sum_j weight_j * cost_j`: a positive weight
//! penalizes a cost, the default collision weight of -50 rewards proximity.

use thiserror::Error;

use crate::dynamics::{rollout, rollout_vjp, DynamicsConfig, DynamicsError, StateGrad};
use crate::scenario::{Action, AgentState, CostKind, GuidanceSpec, GuidanceTerm, MapModel, Trajectory};
use crate::sdf::SignedDistanceField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("guidance diverged: non-finite actions after inner step {step}")]
    Diverged { step: usize },
    #[error("invalid guidance spec: {0}")]
    Spec(String),
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cost value with its gradient with respect to the actions, `[T][N][accel, yaw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub cost: f64,
    pub grad: Vec<Vec<[f64; 2]>>,
}

/// Cost with gradient on the states, before chaining through the dynamics.
struct StateCost {
    cost: f64,
    grad: Vec<Vec<StateGrad>>,
}

impl StateCost {
    fn zeros(traj: &Trajectory) -> Self {
        Self {
            cost: 0.0,
            grad: vec![vec![StateGrad::default(); traj.num_agents()]; traj.states.len()],
        }
    }
}

fn all_agents(_: usize) -> bool {
    true
}

/// Pairwise proximity penalty `sum_t sum_{i<j} discount^(t-1) softplus(d_safe - d_ij(t))`
/// over future rows `t = 1..=T`, with `d_safe = r_i + r_j + margin`.
fn collision_states(
    traj: &Trajectory,
    radii: &[f64],
    margin: f64,
    discount: f64,
    in_scope: &dyn Fn(usize) -> bool,
) -> StateCost {
    let mut out = StateCost::zeros(traj);
    let n = traj.num_agents();
    let mut gamma = 1.0;
    for t in 1..traj.states.len() {
        let row = &traj.states[t];
        for i in 0..n {
            for j in (i + 1)..n {
                if !(in_scope(i) || in_scope(j)) {
                    continue;
                }
                let (dx, dy) = (row[i].x - row[j].x, row[i].y - row[j].y);
                let d = dx.hypot(dy);
                let u = radii[i] + radii[j] + margin - d;
                out.cost += gamma * softplus(u);
                if d > 0.0 {
                    let s = -gamma * sigmoid(u) / d;
                    out.grad[t][i].x += s * dx;
                    out.grad[t][i].y += s * dy;
                    out.grad[t][j].x -= s * dx;
                    out.grad[t][j].y -= s * dy;
                }
            }
        }
        gamma *= discount;
    }
    out
}

/// `sum_t sum_i discount^(t-1) softplus(-sdf(p_i(t)))`.
fn offroad_states(
    traj: &Trajectory,
    sdf: &SignedDistanceField,
    discount: f64,
    in_scope: &dyn Fn(usize) -> bool,
) -> StateCost {
    let mut out = StateCost::zeros(traj);
    let mut gamma = 1.0;
    for t in 1..traj.states.len() {
        for (i, s) in traj.states[t].iter().enumerate() {
            if !in_scope(i) {
                continue;
            }
            let (v, g) = sdf.sample(s.x, s.y);
            out.cost += gamma * softplus(-v);
            let k = -gamma * sigmoid(-v);
            out.grad[t][i].x += k * g[0];
            out.grad[t][i].y += k * g[1];
        }
        gamma *= discount;
    }
    out
}

/// `-sum_t sum_i discount^(t-1) softplus(speed_i(t) - v_limit)`.
fn overspeed_states(
    traj: &Trajectory,
    v_limit: f64,
    discount: f64,
    in_scope: &dyn Fn(usize) -> bool,
) -> StateCost {
    let mut out = StateCost::zeros(traj);
    let mut gamma = 1.0;
    for t in 1..traj.states.len() {
        for (i, s) in traj.states[t].iter().enumerate() {
            if !in_scope(i) {
                continue;
            }
            let u = s.speed - v_limit;
            out.cost -= gamma * softplus(u);
            out.grad[t][i].speed -= gamma * sigmoid(u);
        }
        gamma *= discount;
    }
    out
}

fn chain(traj: &Trajectory, raw: &[Vec<Action>], sc: StateCost, dyn_cfg: &DynamicsConfig) -> CostEval {
    CostEval {
        cost: sc.cost,
        grad: rollout_vjp(traj, raw, &sc.grad, dyn_cfg),
    }
}

/// Collision cost of a trajectory, differentiated with respect to its actions.
pub fn collision_cost(
    traj: &Trajectory,
    radii: &[f64],
    spec: &GuidanceSpec,
    dyn_cfg: &DynamicsConfig,
) -> CostEval {
    let sc = collision_states(traj, radii, spec.collision_margin, spec.discount, &all_agents);
    chain(traj, &traj.actions, sc, dyn_cfg)
}

pub fn offroad_cost(
    traj: &Trajectory,
    map: &MapModel,
    spec: &GuidanceSpec,
    dyn_cfg: &DynamicsConfig,
) -> CostEval {
    let sdf = SignedDistanceField::from_grid(&map.drivable);
    let sc = offroad_states(traj, &sdf, spec.discount, &all_agents);
    chain(traj, &traj.actions, sc, dyn_cfg)
}

pub fn overspeed_cost(
    traj: &Trajectory,
    v_limit: f64,
    spec: &GuidanceSpec,
    dyn_cfg: &DynamicsConfig,
) -> CostEval {
    let sc = overspeed_states(traj, v_limit, spec.discount, &all_agents);
    chain(traj, &traj.actions, sc, dyn_cfg)
}

/// Scene-dependent data the inner loop needs, computed once per sample.
#[derive(Debug, Clone)]
pub struct GuidanceContext {
    pub initial: Vec<AgentState>,
    pub radii: Vec<f64>,
    pub sdf: SignedDistanceField,
    pub dt: f64,
    pub dynamics: DynamicsConfig,
}

impl GuidanceContext {
    pub fn new(initial: Vec<AgentState>, map: &MapModel, dt: f64, dynamics: DynamicsConfig) -> Self {
        let radii = initial.iter().map(AgentState::radius).collect();
        Self {
            initial,
            radii,
            sdf: SignedDistanceField::from_grid(&map.drivable),
            dt,
            dynamics,
        }
    }
}

/// Weighted objective `J` for one term set and its action gradient, with
/// every term's gradient zeroed outside that term's scope.
pub fn weighted_objective(
    ctx: &GuidanceContext,
    spec: &GuidanceSpec,
    actions: &[Vec<Action>],
) -> Result<CostEval, GuidanceError> {
    let traj = rollout(&ctx.initial, actions, ctx.dt, &ctx.dynamics)?;
    Ok(objective_on(ctx, spec, &traj, actions))
}

fn term_eval(ctx: &GuidanceContext, spec: &GuidanceSpec, term: &GuidanceTerm, traj: &Trajectory, raw: &[Vec<Action>]) -> CostEval {
    let scope = |i: usize| term.in_scope(i);
    let sc = match term.cost {
        CostKind::Collision => collision_states(traj, &ctx.radii, spec.collision_margin, spec.discount, &scope),
        CostKind::Offroad => offroad_states(traj, &ctx.sdf, spec.discount, &scope),
        CostKind::Overspeed => overspeed_states(traj, spec.speed_limit, spec.discount, &scope),
    };
    let mut eval = chain(traj, raw, sc, &ctx.dynamics);
    for row in &mut eval.grad {
        for (i, g) in row.iter_mut().enumerate() {
            if !term.in_scope(i) {
                *g = [0.0, 0.0];
            }
        }
    }
    eval
}

fn objective_on(ctx: &GuidanceContext, spec: &GuidanceSpec, traj: &Trajectory, raw: &[Vec<Action>]) -> CostEval {
    let n = traj.num_agents();
    let mut total = CostEval {
        cost: 0.0,
        grad: vec![vec![[0.0; 2]; n]; traj.horizon()],
    };
    for term in spec.terms.iter().filter(|t| t.weight != 0.0) {
        let e = term_eval(ctx, spec, term, traj, raw);
        total.cost += term.weight * e.cost;
        for (trow, erow) in total.grad.iter_mut().zip(&e.grad) {
            for (tg, eg) in trow.iter_mut().zip(erow) {
                tg[0] += term.weight * eg[0];
                tg[1] += term.weight * eg[1];
            }
        }
    }
    total
}

/// Result of the inner guidance loop.
#[derive(Debug, Clone)]
pub struct GuidanceOutcome {
    pub actions: Vec<Vec<Action>>,
    /// Descent direction `-dJ/da` at the input actions, rho-masked, `[T][N][2]`.
    /// `None` when the update was skipped.
    pub initial_direction: Option<Vec<Vec<[f64; 2]>>>,
    pub objective_before: f64,
    pub objective_after: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment descent on the weighted objective for `spec.grad_steps`
/// iterations. Gradient rows of agents with `rho[i] = false` are zeroed, so
/// those agents' actions come back bit-identical; the total gradient norm is
/// clipped to `spec.grad_norm_clip`.
pub fn masked_guidance_update(
    actions: &[Vec<Action>],
    rho: &[bool],
    spec: &GuidanceSpec,
    ctx: &GuidanceContext,
) -> Result<GuidanceOutcome, GuidanceError> {
    let n = ctx.initial.len();
    spec.check(n).map_err(GuidanceError::Spec)?;
    let skip = GuidanceOutcome {
        actions: actions.to_vec(),
        initial_direction: None,
        objective_before: 0.0,
        objective_after: 0.0,
    };
    if !spec.is_active() || !rho.iter().any(|&r| r) {
        return Ok(skip);
    }
    let horizon = actions.len();
    let mut a = actions.to_vec();
    let mut m = vec![vec![[0.0f64; 2]; n]; horizon];
    let mut v = vec![vec![[0.0f64; 2]; n]; horizon];
    let mut first_dir = None;
    let mut before = 0.0;
    for step in 1..=spec.grad_steps {
        let mut eval = weighted_objective(ctx, spec, &a)?;
        if step == 1 {
            before = eval.cost;
        }
        let mut sq = 0.0;
        for row in &mut eval.grad {
            for (i, g) in row.iter_mut().enumerate() {
                if !rho[i] {
                    *g = [0.0, 0.0];
                }
                sq += g[0] * g[0] + g[1] * g[1];
            }
        }
        if step == 1 {
            first_dir = Some(
                eval.grad
                    .iter()
                    .map(|row| row.iter().map(|g| [-g[0], -g[1]]).collect())
                    .collect(),
            );
        }
        let norm = sq.sqrt();
        let scale = if norm > spec.grad_norm_clip {
            spec.grad_norm_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for t in 0..horizon {
            for i in 0..n {
                if !rho[i] {
                    continue;
                }
                for c in 0..2 {
                    let g = eval.grad[t][i][c] * scale;
                    m[t][i][c] = ADAM_BETA1 * m[t][i][c] + (1.0 - ADAM_BETA1) * g;
                    v[t][i][c] = ADAM_BETA2 * v[t][i][c] + (1.0 - ADAM_BETA2) * g * g;
                    let delta = spec.grad_lr * (m[t][i][c] / bc1) / ((v[t][i][c] / bc2).sqrt() + ADAM_EPS);
                    let target = if c == 0 {
                        &mut a[t][i].accel
                    } else {
                        &mut a[t][i].yaw_rate
                    };
                    *target -= delta;
                    if !target.is_finite() {
                        return Err(GuidanceError::Diverged { step });
                    }
                }
            }
        }
    }
    let after = weighted_objective(ctx, spec, &a)?.cost;
    Ok(GuidanceOutcome {
        actions: a,
        initial_direction: first_dir,
        objective_before: before,
        objective_after: after,
    })
}
