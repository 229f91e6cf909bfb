//! Domain types shared across the pipeline: agent states, actions, maps,
//! scenes, trajectories and guidance specifications.
//!
//! All types are plain value data. They serialize to JSON with explicit
//! field names; units are meters, seconds and radians throughout.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > PI {
        t -= two_pi;
    }
    t
}

/// Kinematic state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading,
            speed,
            length: 4.5,
            width: 2.0,
        }
    }

    pub fn with_size(mut self, length: f64, width: f64) -> Self {
        self.length = length;
        self.width = width;
        self
    }

    /// Radius of the disc footprint used for collision tests.
    pub fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    pub fn velocity(&self) -> (f64, f64) {
        (
            self.speed * self.heading.cos(),
            self.speed * self.heading.sin(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.heading.is_finite()
            && self.speed.is_finite()
            && self.length.is_finite()
            && self.width.is_finite()
    }
}

/// Control input for one agent over one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        accel: 0.0,
        yaw_rate: 0.0,
    };

    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }
}

/// Boolean drivable-area occupancy grid.
///
/// Cells are stored row-major. Cell `(row, col)` covers
/// `x in [origin_x + col*res, origin_x + (col+1)*res)` and
/// `y in [origin_y + row*res, origin_y + (row+1)*res)`; row index grows with `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: [f64; 2], resolution: f64, width: usize, height: usize) -> Self {
        Self {
            origin,
            resolution,
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    /// Cell containing `(x, y)`, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cx = (x - self.origin[0]) / self.resolution;
        let cy = (y - self.origin[1]) / self.resolution;
        if !(cx >= 0.0 && cy >= 0.0) {
            return None;
        }
        let (col, row) = (cx.floor() as usize, cy.floor() as usize);
        if col < self.width && row < self.height {
            Some((row, col))
        } else {
            None
        }
    }

    /// Center of a cell in world coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Whether a point lies on a drivable cell. Points outside the grid are not drivable.
    pub fn is_drivable(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(r, c)| self.get(r, c))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// World-space extent `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.width as f64 * self.resolution,
            self.origin[1] + self.height as f64 * self.resolution,
        )
    }
}

/// Static map: drivable grid plus directed lane centerlines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapModel {
    pub drivable: OccupancyGrid,
    pub lanes: Vec<Vec<[f64; 2]>>,
}

/// One agent's observed history, oldest state first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: usize,
    pub history: Vec<AgentState>,
}

impl AgentRecord {
    /// Most recent state. Histories are never empty in a valid scene.
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("agent history is empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub map: MapModel,
    pub agents: Vec<AgentRecord>,
    pub dt: f64,
    pub t0: usize,
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    /// Current (last history) state of every agent, in agent order.
    pub fn current_states(&self) -> Vec<AgentState> {
        self.agents.iter().map(|a| *a.current()).collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.current().radius()).collect()
    }
}

/// Time-indexed states and actions for all agents.
///
/// `states` has `T + 1` rows: row 0 is the initial state and
/// `states[t + 1] = step_unicycle(states[t], actions[t], dt)` for `t < T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<AgentState>>,
    pub actions: Vec<Vec<Action>>,
    pub dt: f64,
}

impl Trajectory {
    /// Number of action steps `T`.
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn num_agents(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn initial(&self) -> &[AgentState] {
        &self.states[0]
    }

    pub fn final_states(&self) -> &[AgentState] {
        self.states.last().expect("trajectory has no states")
    }

    /// Positions of agent `i` over all `T + 1` rows.
    pub fn positions(&self, agent: usize) -> Vec<(f64, f64)> {
        self.states.iter().map(|row| (row[agent].x, row[agent].y)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Collision,
    Offroad,
    Overspeed,
}

/// One weighted cost term with its agent scope. `scope: None` means all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceTerm {
    pub cost: CostKind,
    pub weight: f64,
    #[serde(default)]
    pub scope: Option<Vec<usize>>,
}

impl GuidanceTerm {
    pub fn in_scope(&self, agent: usize) -> bool {
        self.scope.as_ref().is_none_or(|s| s.contains(&agent))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    pub terms: Vec<GuidanceTerm>,
    pub grad_steps: usize,
    pub grad_lr: f64,
    pub grad_norm_clip: f64,
    pub discount: f64,
    /// Extra clearance added to the summed footprint radii in the collision cost.
    pub collision_margin: f64,
    /// Speed limit for the over-speed term, m/s.
    pub speed_limit: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            terms: vec![
                GuidanceTerm {
                    cost: CostKind::Collision,
                    weight: -50.0,
                    scope: None,
                },
                GuidanceTerm {
                    cost: CostKind::Offroad,
                    weight: 1.0,
                    scope: None,
                },
            ],
            grad_steps: 30,
            grad_lr: 0.001,
            grad_norm_clip: 100.0,
            discount: 0.99,
            collision_margin: 0.5,
            speed_limit: 10.0,
        }
    }
}

impl GuidanceSpec {
    /// A spec with no cost terms; guidance becomes a no-op.
    pub fn empty() -> Self {
        Self {
            terms: Vec::new(),
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.grad_steps > 0 && self.terms.iter().any(|t| t.weight != 0.0)
    }

    /// Structural checks against an `n_agents` scene.
    pub fn check(&self, n_agents: usize) -> Result<(), String> {
        if !(self.grad_lr > 0.0) {
            return Err(format!("grad_lr must be > 0, got {}", self.grad_lr));
        }
        if !(self.grad_norm_clip > 0.0) {
            return Err(format!(
                "grad_norm_clip must be > 0, got {}",
                self.grad_norm_clip
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(format!("discount must be in (0, 1], got {}", self.discount));
        }
        for term in &self.terms {
            if let Some(scope) = &term.scope {
                if let Some(bad) = scope.iter().find(|&&i| i >= n_agents) {
                    return Err(format!(
                        "scope index {bad} out of range for {n_agents} agents"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A single broken invariant found by [`validate_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    DuplicateId { id: usize },
    IdOutOfRange { id: usize, n_agents: usize },
    EmptyHistory { agent: usize },
    HistoryLength { agent: usize, expected: usize, found: usize },
    HeadingUnnormalized { agent: usize, step: usize, heading: f64 },
    NegativeSpeed { agent: usize, step: usize, speed: f64 },
    NonPositiveSize { agent: usize, step: usize },
    NonFinite { agent: usize, step: usize },
    BadTimestep { dt: f64 },
    BadResolution { resolution: f64 },
    GridShape { expected: usize, found: usize },
    ShortLane { lane: usize, points: usize },
    LaneOutsideGrid { lane: usize, point: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate-id({id})"),
            Violation::IdOutOfRange { id, n_agents } => {
                write!(f, "id-out-of-range({id} not in [0, {n_agents}))")
            }
            Violation::EmptyHistory { agent } => write!(f, "empty-history(agent {agent})"),
            Violation::HistoryLength {
                agent,
                expected,
                found,
            } => write!(
                f,
                "history-length(agent {agent}: expected {expected}, found {found})"
            ),
            Violation::HeadingUnnormalized {
                agent,
                step,
                heading,
            } => write!(f, "heading-unnormalized(agent {agent}, step {step}: {heading})"),
            Violation::NegativeSpeed { agent, step, speed } => {
                write!(f, "negative-speed(agent {agent}, step {step}: {speed})")
            }
            Violation::NonPositiveSize { agent, step } => {
                write!(f, "non-positive-size(agent {agent}, step {step})")
            }
            Violation::NonFinite { agent, step } => {
                write!(f, "non-finite(agent {agent}, step {step})")
            }
            Violation::BadTimestep { dt } => write!(f, "bad-timestep({dt})"),
            Violation::BadResolution { resolution } => write!(f, "bad-resolution({resolution})"),
            Violation::GridShape { expected, found } => {
                write!(f, "grid-shape(expected {expected} cells, found {found})")
            }
            Violation::ShortLane { lane, points } => {
                write!(f, "short-lane(lane {lane}: {points} points)")
            }
            Violation::LaneOutsideGrid { lane, point } => {
                write!(f, "lane-outside-grid(lane {lane}, point {point})")
            }
        }
    }
}

/// Check the map, agent and history invariants of a scene. An empty result means valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(scene.dt > 0.0 && scene.dt.is_finite()) {
        out.push(Violation::BadTimestep { dt: scene.dt });
    }

    let grid = &scene.map.drivable;
    let grid_ok = grid.resolution > 0.0 && grid.resolution.is_finite();
    if !grid_ok {
        out.push(Violation::BadResolution {
            resolution: grid.resolution,
        });
    }
    if grid.cells.len() != grid.width * grid.height {
        out.push(Violation::GridShape {
            expected: grid.width * grid.height,
            found: grid.cells.len(),
        });
    }
    for (li, lane) in scene.map.lanes.iter().enumerate() {
        if lane.len() < 2 {
            out.push(Violation::ShortLane {
                lane: li,
                points: lane.len(),
            });
        }
        if grid_ok {
            for (pi, p) in lane.iter().enumerate() {
                if !grid.contains(p[0], p[1]) {
                    out.push(Violation::LaneOutsideGrid {
                        lane: li,
                        point: pi,
                    });
                }
            }
        }
    }

    let n = scene.agents.len();
    let expected_len = scene.history_len();
    let mut seen = HashSet::new();
    for (ai, agent) in scene.agents.iter().enumerate() {
        if !seen.insert(agent.id) {
            out.push(Violation::DuplicateId { id: agent.id });
        }
        if agent.id >= n {
            out.push(Violation::IdOutOfRange {
                id: agent.id,
                n_agents: n,
            });
        }
        if agent.history.is_empty() {
            out.push(Violation::EmptyHistory { agent: ai });
        } else if agent.history.len() != expected_len {
            out.push(Violation::HistoryLength {
                agent: ai,
                expected: expected_len,
                found: agent.history.len(),
            });
        }
        for (step, s) in agent.history.iter().enumerate() {
            if !s.is_finite() {
                out.push(Violation::NonFinite { agent: ai, step });
                continue;
            }
            if !(s.heading > -PI && s.heading <= PI) {
                out.push(Violation::HeadingUnnormalized {
                    agent: ai,
                    step,
                    heading: s.heading,
                });
            }
            if s.speed < 0.0 {
                out.push(Violation::NegativeSpeed {
                    agent: ai,
                    step,
                    speed: s.speed,
                });
            }
            if !(s.length > 0.0 && s.width > 0.0) {
                out.push(Violation::NonPositiveSize { agent: ai, step });
            }
        }
    }
    out
}
