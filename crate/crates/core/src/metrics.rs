//! Scenario metrics: collision rate (SCR), off-road rate (ORR), final
//! displacement error (FDE), comfort distance (CFD), their min-max
//! standardization into controllability (CS) and realism (RS) scores, and
//! GD / IGD against a Pareto front over (CS, RS).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{MapModel, Trajectory};

/// Version tag written next to metric outputs. CFD here is the distance
/// between `(mean |accel|, mean |jerk|)` feature vectors.
pub const METRICS_CONVENTION: &str = "metrics-v1 (cfd = |(mean|acc|, mean|jerk|)_gen - (..)_ref|)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("column {0} is degenerate (max == min)")]
    DegenerateColumn(&'static str),
    #[error("need at least {needed} entries, got {found}")]
    TooFew { needed: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Whether any two distinct agents' discs overlap at a future row. With
/// `agents = Some(flags)`, only pairs with at least one flagged agent count.
pub fn has_collision(traj: &Trajectory, agents: Option<&[bool]>) -> bool {
    let n = traj.num_agents();
    let counts = |i: usize, j: usize| agents.is_none_or(|f| f[i] || f[j]);
    traj.states.iter().skip(1).any(|row| {
        (0..n).any(|i| {
            ((i + 1)..n).any(|j| {
                counts(i, j) && {
                    let d = (row[i].x - row[j].x).hypot(row[i].y - row[j].y);
                    d < row[i].radius() + row[j].radius()
                }
            })
        })
    })
}

/// Fraction of scenarios with at least one collision.
pub fn scr(batch: &[Trajectory]) -> Result<f64, MetricsError> {
    if batch.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, found: 0 });
    }
    let hits = batch.iter().filter(|t| has_collision(t, None)).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Percentage of agent-timesteps (future rows) whose center is off the drivable area.
pub fn orr(traj: &Trajectory, map: &MapModel) -> f64 {
    let n = traj.num_agents();
    let rows = traj.horizon();
    if n == 0 || rows == 0 {
        return 0.0;
    }
    let off = traj
        .states
        .iter()
        .skip(1)
        .flatten()
        .filter(|s| !map.drivable.is_drivable(s.x, s.y))
        .count();
    100.0 * off as f64 / (n * rows) as f64
}

pub fn orr_batch(batch: &[(Trajectory, MapModel)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|(t, m)| orr(t, m)).sum::<f64>() / batch.len() as f64
}

/// Mean Euclidean distance between final positions.
pub fn fde(generated: &Trajectory, reference: &Trajectory) -> Result<f64, MetricsError> {
    let (g, r) = (generated.final_states(), reference.final_states());
    if g.len() != r.len() {
        return Err(MetricsError::Shape(format!("{} vs {} agents", g.len(), r.len())));
    }
    if g.is_empty() {
        return Ok(0.0);
    }
    Ok(g.iter().zip(r).map(|(a, b)| (a.x - b.x).hypot(a.y - b.y)).sum::<f64>() / g.len() as f64)
}

/// `(mean |accel|, mean |jerk|)` of one agent's path by finite differences of position.
pub fn smoothness_features(traj: &Trajectory, agent: usize) -> [f64; 2] {
    let dt = traj.dt;
    let p = traj.positions(agent);
    let diff = |xs: &[(f64, f64)]| -> Vec<(f64, f64)> {
        xs.windows(2).map(|w| ((w[1].0 - w[0].0) / dt, (w[1].1 - w[0].1) / dt)).collect()
    };
    let vel = diff(&p);
    let acc = diff(&vel);
    let jerk = diff(&acc);
    let mean_norm = |xs: &[(f64, f64)]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|v| v.0.hypot(v.1)).sum::<f64>() / xs.len() as f64
        }
    };
    [mean_norm(&acc), mean_norm(&jerk)]
}

/// Comfort distance: per-agent distance between smoothness feature vectors, averaged.
pub fn cfd(generated: &Trajectory, reference: &Trajectory) -> Result<f64, MetricsError> {
    let n = generated.num_agents();
    if n != reference.num_agents() {
        return Err(MetricsError::Shape(format!("{} vs {} agents", n, reference.num_agents())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| {
            let a = smoothness_features(generated, i);
            let b = smoothness_features(reference, i);
            (a[0] - b[0]).hypot(a[1] - b[1])
        })
        .sum();
    Ok(total / n as f64)
}

/// Raw metric row for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub method: String,
    pub scr: f64,
    pub orr: f64,
    pub fde: f64,
    pub cfd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScores {
    pub method: String,
    pub cs: f64,
    pub rs: f64,
}

fn min_max(values: impl Iterator<Item = f64> + Clone, name: &'static str) -> Result<(f64, f64), MetricsError> {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(MetricsError::DegenerateColumn(name));
    }
    Ok((lo, hi))
}

/// `CS = (SCR - min) / (max - min)` and
/// `RS = 1 - mean of the min-max standardized ORR, FDE and CFD`, across methods.
pub fn standardize_scores(table: &[RawScores]) -> Result<Vec<StandardScores>, MetricsError> {
    if table.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, found: table.len() });
    }
    let (s0, s1) = min_max(table.iter().map(|r| r.scr), "SCR")?;
    let (o0, o1) = min_max(table.iter().map(|r| r.orr), "ORR")?;
    let (f0, f1) = min_max(table.iter().map(|r| r.fde), "FDE")?;
    let (c0, c1) = min_max(table.iter().map(|r| r.cfd), "CFD")?;
    Ok(table
        .iter()
        .map(|r| StandardScores {
            method: r.method.clone(),
            cs: (r.scr - s0) / (s1 - s0),
            rs: 1.0 - ((r.orr - o0) / (o1 - o0) + (r.fde - f0) / (f1 - f0) + (r.cfd - c0) / (c1 - c0)) / 3.0,
        })
        .collect())
}

fn mean_min_distance(from: &[[f64; 2]], to: &[[f64; 2]], q: f64) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|p| (a[0] - p[0]).hypot(a[1] - p[1]))
                .fold(f64::INFINITY, f64::min)
                .powf(q)
        })
        .sum();
    (total / from.len() as f64).powf(1.0 / q)
}

/// Generational distance of `solutions` to `front` and the inverted
/// generational distance of `front` to `solutions`, both with exponent `q`.
pub fn gd_igd(solutions: &[[f64; 2]], front: &[[f64; 2]], q: f64) -> Result<(f64, f64), MetricsError> {
    if solutions.is_empty() || front.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, found: 0 });
    }
    Ok((mean_min_distance(solutions, front, q), mean_min_distance(front, solutions, q)))
}

/// `a` dominates `b` when it is no worse in both coordinates and better in one.
pub fn dominates(a: &[f64; 2], b: &[f64; 2]) -> bool {
    a[0] >= b[0] && a[1] >= b[1] && (a[0] > b[0] || a[1] > b[1])
}

/// Indices of the nondominated points (both coordinates higher-better).
pub fn pareto_indices(points: &[[f64; 2]]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|p| dominates(p, &points[i])))
        .collect()
}

pub fn pareto_front(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    pareto_indices(points).into_iter().map(|i| points[i]).collect()
}
