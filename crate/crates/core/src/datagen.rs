//! Synthetic maps and rule-following traffic used in place of logged driving data.
//!
//! Agents are placed on lane centerlines and driven by a car-following rule
//! (speed tracking plus a gap term toward the nearest agent ahead) with
//! pure-pursuit steering. Scenes whose trajectories contain any footprint
//! overlap are rejected and resampled.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::compute_ttc;
use crate::dynamics::{rollout, step_unicycle, DynamicsConfig, DynamicsError};
use crate::lanes;
use crate::metrics::has_collision;
use crate::scenario::{normalize_angle, Action, AgentRecord, AgentState, MapModel, OccupancyGrid, Scene, Trajectory};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("could not place {n_agents} agents without overlap after {attempts} attempts")]
    PlacementFailure { n_agents: usize, attempts: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    TJunction,
    Crossroads,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "straight" => Ok(Self::Straight),
            "t_junction" => Ok(Self::TJunction),
            "crossroads" => Ok(Self::Crossroads),
            other => Err(format!("unknown layout '{other}'")),
        }
    }
}

const GRID_RESOLUTION: f64 = 0.5;

/// Square map of side `extent` centered at the origin with two-way roads of
/// `lane_width` per lane.
pub fn make_map(layout: Layout, lane_width: f64, extent: f64) -> MapModel {
    let cells = (extent / GRID_RESOLUTION).round() as usize;
    let half = extent / 2.0;
    let mut grid = OccupancyGrid::new([-half, -half], GRID_RESOLUTION, cells, cells);
    let w = lane_width;
    let horizontal = |_x: f64, y: f64| y.abs() <= w;
    let vertical_full = |x: f64, _y: f64| x.abs() <= w;
    let vertical_south = |x: f64, y: f64| x.abs() <= w && y <= w;
    for r in 0..cells {
        for c in 0..cells {
            let (x, y) = grid.cell_center(r, c);
            let on = match layout {
                Layout::Straight => horizontal(x, y),
                Layout::TJunction => horizontal(x, y) || vertical_south(x, y),
                Layout::Crossroads => horizontal(x, y) || vertical_full(x, y),
            };
            grid.set(r, c, on);
        }
    }
    let end = half - 1.0;
    let (lo, hi) = (-w / 2.0, w / 2.0);
    let eastbound = vec![[-end, lo], [end, lo]];
    let westbound = vec![[end, hi], [-end, hi]];
    let lanes = match layout {
        Layout::Straight => vec![eastbound, westbound],
        Layout::Crossroads => vec![
            eastbound,
            westbound,
            vec![[hi, -end], [hi, end]],
            vec![[lo, end], [lo, -end]],
        ],
        Layout::TJunction => {
            // one route per approach: northbound turns left (west), eastbound turns right (south)
            let mut left = vec![[hi, -end]];
            left.extend(lanes::bezier([hi, -w], [hi, hi], [-w, hi], 8));
            left.push([-end, hi]);
            let mut right = vec![[-end, lo]];
            right.extend(lanes::bezier([-w, lo], [lo, lo], [lo, -w], 8));
            right.push([lo, -end]);
            vec![westbound, left, right]
        }
    };
    MapModel {
        drivable: grid,
        lanes,
    }
}

/// Parameters of the rule-based traffic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub history_steps: usize,
    pub future_steps: usize,
    pub dt: f64,
    pub v_des: f64,
    pub k_v: f64,
    pub k_g: f64,
    /// Standstill gap plus `headway * speed` gives the desired gap.
    pub gap_min: f64,
    pub headway: f64,
    pub speed_range: [f64; 2],
    /// Start positions are drawn from this fraction range of the lane length.
    pub start_range: [f64; 2],
    pub max_attempts: usize,
    pub dynamics: DynamicsConfig,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            history_steps: 31,
            future_steps: 100,
            dt: 0.1,
            v_des: 8.0,
            k_v: 0.5,
            k_g: 0.2,
            gap_min: 6.0,
            headway: 1.0,
            speed_range: [5.0, 9.0],
            start_range: [0.05, 0.35],
            max_attempts: 100,
            dynamics: DynamicsConfig::default(),
        }
    }
}

struct Driver {
    lane: usize,
}

fn lookahead(speed: f64) -> f64 {
    (0.8 * speed + 3.0).max(4.0)
}

/// Rule policy action for every agent given the current joint state.
fn rule_actions(states: &[AgentState], drivers: &[Driver], map: &MapModel, cfg: &SceneGenConfig) -> Vec<Action> {
    states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lane = &map.lanes[drivers[i].lane];
            let (sin_h, cos_h) = s.heading.sin_cos();
            // gap to the closest agent ahead in a narrow corridor
            let mut gap = f64::INFINITY;
            let mut yield_to = false;
            for (j, o) in states.iter().enumerate() {
                if j == i {
                    continue;
                }
                let (dx, dy) = (o.x - s.x, o.y - s.y);
                let fwd = dx * cos_h + dy * sin_h;
                let lat = -dx * sin_h + dy * cos_h;
                if fwd > 0.0 && lat.abs() < 2.5 && fwd < 40.0 {
                    gap = gap.min(fwd - s.radius() - o.radius());
                }
                if j < i && compute_ttc(s, o) < 3.5 && fwd > 0.0 {
                    yield_to = true;
                }
            }
            let mut accel = cfg.k_v * (cfg.v_des - s.speed);
            if gap.is_finite() {
                let desired = cfg.gap_min + cfg.headway * s.speed;
                accel += cfg.k_g * (gap - desired).min(0.0);
            }
            if yield_to {
                accel = accel.min(-3.0);
            }
            let proj = lanes::project(lane, s.x, s.y);
            let ld = lookahead(s.speed);
            let (target, _) = lanes::point_at(lane, proj.s + ld);
            let alpha = normalize_angle((target[1] - s.y).atan2(target[0] - s.x) - s.heading);
            let curvature = 2.0 * alpha.sin() / ld;
            let yaw = s.speed.max(1.0) * curvature;
            cfg.dynamics.clamp(Action::new(accel, yaw))
        })
        .collect()
}

/// A scene with `history_steps` of history plus its ground-truth continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene: Scene,
    pub reference: Trajectory,
}

pub fn make_scene(
    map: &MapModel,
    n_agents: usize,
    rng: &mut impl Rng,
    cfg: &SceneGenConfig,
) -> Result<SceneSample, DatagenError> {
    let h = cfg.history_steps.max(1);
    for _ in 0..cfg.max_attempts {
        if let Some(sample) = try_make_scene(map, n_agents, rng, cfg, h)? {
            return Ok(sample);
        }
    }
    Err(DatagenError::PlacementFailure {
        n_agents,
        attempts: cfg.max_attempts,
    })
}

fn try_make_scene(
    map: &MapModel,
    n_agents: usize,
    rng: &mut impl Rng,
    cfg: &SceneGenConfig,
    h: usize,
) -> Result<Option<SceneSample>, DatagenError> {
    let mut init: Vec<AgentState> = Vec::with_capacity(n_agents);
    let mut drivers = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let mut placed = false;
        for _ in 0..20 {
            let lane_id = rng.random_range(0..map.lanes.len());
            let lane = &map.lanes[lane_id];
            let len = lanes::length(lane);
            let s = len * rng.random_range(cfg.start_range[0]..cfg.start_range[1]);
            let (p, heading) = lanes::point_at(lane, s);
            let length = rng.random_range(4.0..5.0);
            let width = rng.random_range(1.8..2.1);
            let speed = rng.random_range(cfg.speed_range[0]..cfg.speed_range[1]);
            let cand = AgentState::new(p[0], p[1], normalize_angle(heading), speed).with_size(length, width);
            let clear = init.iter().all(|o| {
                (o.x - cand.x).hypot(o.y - cand.y) > o.radius() + cand.radius() + 4.0
            });
            if clear {
                init.push(cand);
                drivers.push(Driver { lane: lane_id });
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }

    let total = h - 1 + cfg.future_steps;
    let mut states = init.clone();
    let mut history: Vec<Vec<AgentState>> = vec![states.clone()];
    let mut future_actions = Vec::with_capacity(cfg.future_steps);
    for step in 0..total {
        let actions = rule_actions(&states, &drivers, map, cfg);
        if step + 1 >= h {
            future_actions.push(actions.clone());
        }
        states = states
            .iter()
            .zip(&actions)
            .map(|(s, a)| step_unicycle(s, a, cfg.dt, &cfg.dynamics))
            .collect::<Result<_, _>>()?;
        if step + 1 < h {
            history.push(states.clone());
        }
    }
    let current = history.last().expect("history has at least one row").clone();
    let reference = rollout(&current, &future_actions, cfg.dt, &cfg.dynamics)?;
    let past = Trajectory {
        states: history.clone(),
        actions: vec![vec![Action::ZERO; n_agents]; h - 1],
        dt: cfg.dt,
    };
    if has_collision(&reference, None) || has_collision(&past, None) {
        return Ok(None);
    }
    let agents = (0..n_agents)
        .map(|i| AgentRecord {
            id: i,
            history: history.iter().map(|row| row[i]).collect(),
        })
        .collect();
    Ok(Some(SceneSample {
        scene: Scene {
            map: map.clone(),
            agents,
            dt: cfg.dt,
            t0: h - 1,
        },
        reference,
    }))
}

/// Dataset recipe: which layouts, how many agents, which seed ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub layouts: Vec<Layout>,
    pub agents: [usize; 2],
    pub lane_width: f64,
    pub extent: f64,
    pub scene: SceneGenConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 20,
            layouts: vec![Layout::Crossroads, Layout::TJunction, Layout::Straight],
            agents: [3, 6],
            lane_width: 5.5,
            extent: 160.0,
            scene: SceneGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub seed: u64,
    pub split: Split,
    pub layout: Layout,
    pub n_agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_seed: u64,
    pub train_seeds: [u64; 2],
    pub val_seeds: [u64; 2],
    pub entries: Vec<DatasetEntry>,
}

/// Seed for scene `index`; train scenes use `[base, base + n_train)` and
/// validation scenes the range right after it.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Generate one scene from its seed; layout and agent count are drawn from the seed too.
pub fn generate_one(cfg: &DatasetConfig, seed: u64) -> Result<(SceneSample, Layout), DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = cfg.layouts[rng.random_range(0..cfg.layouts.len())];
    let n = rng.random_range(cfg.agents[0]..=cfg.agents[1]);
    let map = make_map(layout, cfg.lane_width, cfg.extent);
    Ok((make_scene(&map, n, &mut rng, &cfg.scene)?, layout))
}

/// Generate every scene of the recipe in parallel. Output order is by index.
pub fn generate_dataset(cfg: &DatasetConfig, base_seed: u64) -> Result<Vec<(DatasetEntry, SceneSample)>, DatagenError> {
    let total = cfg.n_train + cfg.n_val;
    (0..total)
        .into_par_iter()
        .map(|k| {
            let seed = scene_seed(base_seed, k);
            let (sample, layout) = generate_one(cfg, seed)?;
            let split = if k < cfg.n_train { Split::Train } else { Split::Val };
            let entry = DatasetEntry {
                file: format!("scenes/scene_{k:05}.json"),
                seed,
                split,
                layout,
                n_agents: sample.scene.num_agents(),
            };
            Ok((entry, sample))
        })
        .collect()
}

/// Write scenes and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, base_seed: u64, cfg: &DatasetConfig, items: &[(DatasetEntry, SceneSample)]) -> Result<DatasetManifest, DatagenError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| DatagenError::Io { path, source }
    };
    let scenes = dir.join("scenes");
    fs::create_dir_all(&scenes).map_err(io_err(&scenes))?;
    for (entry, sample) in items {
        let path = dir.join(&entry.file);
        fs::write(&path, serde_json::to_vec(sample)?).map_err(io_err(&path))?;
    }
    let manifest = DatasetManifest {
        base_seed,
        train_seeds: [base_seed, base_seed + cfg.n_train as u64],
        val_seeds: [base_seed + cfg.n_train as u64, base_seed + (cfg.n_train + cfg.n_val) as u64],
        entries: items.iter().map(|(e, _)| e.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<(DatasetEntry, SceneSample)>, DatagenError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| DatagenError::Io { path, source }
    };
    let mpath = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath).map_err(io_err(&mpath))?)?;
    manifest
        .entries
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            let path = dir.join(&e.file);
            let sample = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
            Ok((e, sample))
        })
        .collect()
}

/// Heading of a lane's first segment; convenience for tests and plots.
pub fn lane_heading(lane: &[[f64; 2]]) -> f64 {
    let (dx, dy) = (lane[1][0] - lane[0][0], lane[1][1] - lane[0][1]);
    dy.atan2(dx).rem_euclid(2.0 * PI)
}
