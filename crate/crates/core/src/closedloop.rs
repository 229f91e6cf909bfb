//! Receding-horizon simulation: sample, commit a prefix, append it to the
//! history, repeat.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{guided_sample, shifted_scene, NoiseSchedule, SampleError, SamplerConfig};
use crate::denoiser::Denoiser;
use crate::dynamics::{rollout, DynamicsConfig, DynamicsError};
use crate::metrics::{cfd, fde, has_collision, orr, MetricsError};
use crate::scenario::{Scene, Trajectory};

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("replan {replan}: {source}")]
    Sampler { replan: usize, source: SampleError },
    #[error("replan {replan}: {source}")]
    Dynamics { replan: usize, source: DynamicsError },
    #[error("invalid closed-loop setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Anything that proposes a future for a scene.
pub trait ScenarioSampler: Sync {
    /// Steps produced per call.
    fn horizon(&self) -> usize;
    fn sample(&self, scene: &Scene, seed: u64) -> Result<Trajectory, SampleError>;
}

/// The guided diffusion sampler with a fixed configuration; `seed` overrides `cfg.seed`.
pub struct DiffusionSampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub cfg: SamplerConfig,
}

impl ScenarioSampler for DiffusionSampler<'_> {
    fn horizon(&self) -> usize {
        self.denoiser.horizon()
    }

    fn sample(&self, scene: &Scene, seed: u64) -> Result<Trajectory, SampleError> {
        let cfg = SamplerConfig { seed, ..self.cfg.clone() };
        guided_sample(scene, self.denoiser, self.schedule, &cfg)
    }
}

/// Agents flagged `false` follow `reference` actions instead of the sampler.
#[derive(Debug, Clone, Copy)]
pub struct Replay<'a> {
    pub reference: &'a Trajectory,
    pub controllable: &'a [bool],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub replan_steps: usize,
    pub horizon_steps: usize,
    pub history_len: usize,
    pub dynamics: DynamicsConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            replan_steps: 10,
            horizon_steps: 100,
            history_len: 31,
            dynamics: DynamicsConfig::default(),
        }
    }
}

/// Seed of replan `r` for a run seeded with `seed`.
pub fn replan_seed(seed: u64, r: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    /// Committed segment of each replan, as rolled out at commit time.
    pub commits: Vec<Trajectory>,
    /// History handed to the sampler at each replan.
    pub histories: Vec<Scene>,
}

pub fn run_closed_loop(
    scene0: &Scene,
    sampler: &dyn ScenarioSampler,
    cfg: &LoopConfig,
    seed: u64,
    replay: Option<Replay<'_>>,
) -> Result<ClosedLoopRun, ClosedLoopError> {
    let gen = sampler.horizon();
    if cfg.replan_steps == 0 || cfg.replan_steps > gen {
        return Err(ClosedLoopError::Setup(format!(
            "replan period {} must be in [1, {gen}]",
            cfg.replan_steps
        )));
    }
    if let Some(r) = &replay {
        if r.reference.horizon() < cfg.horizon_steps || r.controllable.len() != scene0.num_agents() {
            return Err(ClosedLoopError::Setup("replay reference too short or mask size mismatch".into()));
        }
    }
    let n = scene0.num_agents();
    let initial = scene0.current_states();
    let mut states = vec![initial.clone()];
    let mut actions = Vec::with_capacity(cfg.horizon_steps);
    let mut commits = Vec::new();
    let mut histories = Vec::new();
    let mut scene = scene0.clone();
    let mut r = 0;
    while actions.len() < cfg.horizon_steps {
        let keep = cfg.replan_steps.min(cfg.horizon_steps - actions.len());
        let proposal = sampler
            .sample(&scene, replan_seed(seed, r))
            .map_err(|source| ClosedLoopError::Sampler { replan: r, source })?;
        let mut prefix: Vec<_> = proposal.actions[..keep].to_vec();
        if let Some(rep) = &replay {
            let t0 = actions.len();
            for (t, row) in prefix.iter_mut().enumerate() {
                for i in 0..n {
                    if !rep.controllable[i] {
                        row[i] = rep.reference.actions[t0 + t][i];
                    }
                }
            }
        }
        let start = states.last().expect("states start nonempty").clone();
        let seg = rollout(&start, &prefix, scene.dt, &cfg.dynamics)
            .map_err(|source| ClosedLoopError::Dynamics { replan: r, source })?;
        histories.push(scene.clone());
        scene = shifted_scene(&scene, &seg, keep, cfg.history_len);
        states.extend(seg.states[1..].iter().cloned());
        actions.extend(seg.actions.iter().cloned());
        commits.push(seg);
        r += 1;
    }
    Ok(ClosedLoopRun {
        trajectory: Trajectory {
            states,
            actions,
            dt: scene0.dt,
        },
        commits,
        histories,
    })
}

/// One scene of an evaluation batch.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub name: String,
    pub scene: Scene,
    pub reference: Trajectory,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    /// 1 if any pair of agents collides.
    pub collision: f64,
    pub orr: f64,
    pub fde: f64,
    pub cfd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub seed: u64,
    pub metrics: Option<SceneMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub row: EvalRow,
    pub trajectory: Option<Trajectory>,
}

/// Raw metrics of a generated trajectory against the reference, both cut to
/// the generated length.
pub fn scene_metrics(generated: &Trajectory, reference: &Trajectory, scene: &Scene) -> Result<SceneMetrics, MetricsError> {
    let t = generated.horizon().min(reference.horizon());
    let cut = |tr: &Trajectory| Trajectory {
        states: tr.states[..=t].to_vec(),
        actions: tr.actions[..t].to_vec(),
        dt: tr.dt,
    };
    let (g, r) = (cut(generated), cut(reference));
    Ok(SceneMetrics {
        collision: has_collision(&g, None) as u8 as f64,
        orr: orr(&g, &scene.map),
        fde: fde(&g, &r)?,
        cfd: cfd(&g, &r)?,
    })
}

/// Closed-loop run and metrics for every case, in parallel; failures are
/// recorded per row. Output order follows input order.
pub fn batch_evaluate(cases: &[EvalCase], sampler: &dyn ScenarioSampler, cfg: &LoopConfig) -> Vec<EvalOutcome> {
    cases
        .par_iter()
        .map(|c| {
            let res = run_closed_loop(&c.scene, sampler, cfg, c.seed, None)
                .and_then(|run| Ok((scene_metrics(&run.trajectory, &c.reference, &c.scene)?, run.trajectory)));
            match res {
                Ok((m, t)) => EvalOutcome {
                    row: EvalRow {
                        name: c.name.clone(),
                        seed: c.seed,
                        metrics: Some(m),
                        error: None,
                    },
                    trajectory: Some(t),
                },
                Err(e) => EvalOutcome {
                    row: EvalRow {
                        name: c.name.clone(),
                        seed: c.seed,
                        metrics: None,
                        error: Some(e.to_string()),
                    },
                    trajectory: None,
                },
            }
        })
        .collect()
}

/// Aggregate (mean over successful rows): SCR, ORR, FDE, CFD.
pub fn aggregate(rows: &[EvalRow]) -> Option<[f64; 4]> {
    let ok: Vec<&SceneMetrics> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let m = ok.len() as f64;
    Some([
        ok.iter().map(|x| x.collision).sum::<f64>() / m,
        ok.iter().map(|x| x.orr).sum::<f64>() / m,
        ok.iter().map(|x| x.fde).sum::<f64>() / m,
        ok.iter().map(|x| x.cfd).sum::<f64>() / m,
    ])
}

pub fn write_rows_csv(path: &Path, rows: &[EvalRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "name,seed,collision,orr,fde,cfd,error")?;
    for r in rows {
        match &r.metrics {
            Some(m) => writeln!(f, "{},{},{},{},{},{},", r.name, r.seed, m.collision, m.orr, m.fde, m.cfd)?,
            None => writeln!(
                f,
                "{},{},,,,,\"{}\"",
                r.name,
                r.seed,
                r.error.as_deref().unwrap_or("").replace('"', "'")
            )?,
        }
    }
    f.flush()
}
