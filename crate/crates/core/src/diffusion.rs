//! DDPM over normalized action rows: noise schedule, training with random
//! graph dropout, and the guided reverse sampler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{
    build_dcg, conflict_diagnostics, full_mask, identity_mask, rank_agents, ttc_mask, ttc_mask_states, BoolMatrix,
    CausalError, CausalRank, DecisionCausalGraph, RankingMode,
};
use crate::datagen::SceneSample;
use crate::denoiser::{
    forward_backward, ActionScale, Architecture, Denoiser, DenoiserError, DenoiserInput, DenoiserParams, SceneFeatures, SceneEncoder,
};
use crate::dynamics::{rollout, DynamicsConfig, DynamicsError};
use crate::guidance::{masked_guidance_update, GuidanceContext, GuidanceError};
use crate::scenario::{AgentRecord, GuidanceSpec, Scene, Trajectory};
use crate::sdf::SignedDistanceField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Per-step quantities for k = 1..=K, stored at index k - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    /// Squared-cosine schedule with offset 0.008, betas capped at 0.999.
    pub fn cosine(k: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| (((t / k as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (1..=k)
            .map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(betas)
    }

    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas = (0..k)
            .map(|i| {
                let t = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                beta_start + t * (beta_end - beta_start)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn new(kind: ScheduleKind, k: usize) -> Self {
        match kind {
            ScheduleKind::Cosine => Self::cosine(k),
            ScheduleKind::Linear => Self::linear(k, 1e-4, 0.02),
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `abar_k`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Coefficients `(c0, ck)` of the posterior mean `c0 * x0_hat + ck * x_k`.
    pub fn posterior_coefficients(&self, k: usize) -> (f64, f64) {
        let (ab, ab_prev) = (self.alpha_bar(k), self.alpha_bar(k - 1));
        let (beta, alpha) = (self.betas[k - 1], self.alphas[k - 1]);
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }
}

/// `sqrt(abar) x + sqrt(1 - abar) eps`, with `abar = abar_k` (k = 0 is the identity).
pub fn forward_noise(x: &[Vec<f64>], k: usize, schedule: &NoiseSchedule, noise: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x.iter()
        .zip(noise)
        .map(|(r, e)| r.iter().zip(e).map(|(x, e)| a * x + b * e).collect())
        .collect()
}

fn gaussian_rows(rng: &mut impl Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("training data: {0}")]
    Data(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p_uncond: f64,
    pub lr: f64,
    pub batch: usize,
    pub ema_decay: f64,
    pub epochs: usize,
    pub yaw_reg: f64,
    pub c_ttc: f64,
    pub d_max: f64,
    /// Offset between successive training windows cut from one scene, in steps.
    pub window_stride: usize,
    /// Stop after this many optimizer steps; 0 runs every epoch.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.2,
            lr: 1e-4,
            batch: 100,
            ema_decay: 0.995,
            epochs: 20,
            yaw_reg: 0.1,
            c_ttc: 3.0,
            d_max: 50.0,
            window_stride: 8,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(format!("p_uncond must be in [0, 1], got {}", self.p_uncond));
        }
        if !(self.lr > 0.0) || self.batch == 0 || !(0.0..1.0).contains(&self.ema_decay) || self.window_stride == 0 {
            return Err("lr > 0, batch > 0, ema_decay in [0, 1) and window_stride > 0 are required".into());
        }
        Ok(())
    }
}

/// One training example: scene features, the clean-history TTC mask and the
/// `[N][2T]` normalized target actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: SceneFeatures,
    pub mask: BoolMatrix,
    pub target: Vec<Vec<f64>>,
}

/// Cut windows of `arch.horizon` future steps every `stride` steps out of each
/// sample; the history of a window is the last `history_len` states before it.
pub fn training_items(
    samples: &[SceneSample],
    history_len: usize,
    horizon: usize,
    scale: &ActionScale,
    cfg: &TrainConfig,
) -> Vec<TrainItem> {
    samples
        .par_iter()
        .flat_map_iter(|s| {
            let sdf = SignedDistanceField::from_grid(&s.scene.map.drivable);
            let future = s.reference.horizon();
            let mut out = Vec::new();
            if s.scene.num_agents() == 0 || future < horizon {
                return out;
            }
            let mut offset = 0;
            while offset + horizon <= future {
                let scene = shifted_scene(&s.scene, &s.reference, offset, history_len);
                let target = scale.normalize(&s.reference.actions[offset..offset + horizon]);
                out.push(TrainItem {
                    features: SceneFeatures::from_scene(&scene, history_len, &sdf),
                    mask: ttc_mask(&scene, cfg.c_ttc, cfg.d_max),
                    target,
                });
                offset += cfg.window_stride;
            }
            out
        })
        .collect()
}

/// The scene `offset` steps into `future`, keeping the last `history_len` states.
pub fn shifted_scene(scene: &Scene, future: &Trajectory, offset: usize, history_len: usize) -> Scene {
    let agents = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut h: Vec<_> = a.history.clone();
            h.extend(future.states[1..=offset].iter().map(|row| row[i]));
            let skip = h.len().saturating_sub(history_len);
            AgentRecord {
                id: a.id,
                history: h.split_off(skip),
            }
        })
        .collect();
    Scene {
        map: scene.map.clone(),
        agents,
        dt: scene.dt,
        t0: scene.t0 + offset,
    }
}

/// Parameters, Adam moments and the EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub ema: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        let n = params.data.len();
        Self {
            ema: params.data.clone(),
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn ema_params(&self) -> DenoiserParams {
        DenoiserParams {
            arch: self.params.arch,
            data: self.ema.clone(),
        }
    }

    pub fn ema_encoder(&self, scale: ActionScale) -> Result<SceneEncoder, DenoiserError> {
        SceneEncoder::new(self.ema_params(), scale)
    }
}

/// What one step did, for logging and instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub ks: Vec<usize>,
    /// Items whose graph was replaced by the identity.
    pub identity: Vec<bool>,
}

/// Squared error on clean actions plus `yaw_reg * mean(yaw^2)` of the
/// prediction, and its gradient with respect to the prediction.
pub fn item_loss(pred: &[Vec<f64>], target: &[Vec<f64>], yaw_reg: f64) -> (f64, Vec<Vec<f64>>) {
    let n = pred.len();
    let len = pred.first().map_or(0, Vec::len);
    let count = (n * len).max(1) as f64;
    let yaw_count = (n * len / 2).max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .enumerate()
                .map(|(c, (&pv, &tv))| {
                    let e = pv - tv;
                    loss += e * e / count;
                    let mut g = 2.0 * e / count;
                    if c % 2 == 1 {
                        loss += yaw_reg * pv * pv / yaw_count;
                        g += 2.0 * yaw_reg * pv / yaw_count;
                    }
                    g
                })
                .collect()
        })
        .collect();
    (loss, grad)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update on the mean loss of `batch`, followed by the EMA update.
/// Randomness is drawn sequentially before the parallel passes, and gradients
/// are summed in batch order, so results do not depend on the thread count.
pub fn train_step(
    batch: &[&TrainItem],
    state: &mut TrainState,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<StepReport, TrainError> {
    cfg.check().map_err(TrainError::Data)?;
    let k_max = schedule.steps();
    let horizon = state.params.arch.horizon;
    let draws: Vec<(usize, bool, Vec<Vec<f64>>)> = batch
        .iter()
        .map(|item| {
            let k = rng.random_range(1..=k_max);
            let drop = rng.random_bool(cfg.p_uncond);
            let eps = gaussian_rows(rng, item.target.len(), 2 * horizon);
            (k, drop, eps)
        })
        .collect();
    let params = &state.params;
    let results: Vec<Option<(f64, Vec<f64>)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, (k, drop, eps))| {
            let n = item.target.len();
            if n == 0 {
                return None;
            }
            let noisy = forward_noise(&item.target, *k, schedule, eps);
            let id;
            let mask = if *drop {
                id = identity_mask(n);
                &id
            } else {
                &item.mask
            };
            let input = DenoiserInput {
                noisy: &noisy,
                features: &item.features,
                k: *k,
                alpha_bar: schedule.alpha_bar(*k),
                mask,
            };
            Some(forward_backward(&input, params, |out| item_loss(&out.actions, &item.target, cfg.yaw_reg)))
        })
        .collect();
    let used = results.iter().flatten().count();
    if used == 0 {
        return Err(TrainError::Data("batch has no agents".into()));
    }
    let mut grad = vec![0.0; state.params.data.len()];
    let mut loss = 0.0;
    for (l, g) in results.iter().flatten() {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / used as f64;
    loss *= inv;
    state.step += 1;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step });
    }
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (idx, g) in grad.iter().enumerate() {
        let g = g * inv;
        state.m[idx] = ADAM_BETA1 * state.m[idx] + (1.0 - ADAM_BETA1) * g;
        state.v[idx] = ADAM_BETA2 * state.v[idx] + (1.0 - ADAM_BETA2) * g * g;
        state.params.data[idx] -= cfg.lr * (state.m[idx] / bc1) / ((state.v[idx] / bc2).sqrt() + ADAM_EPS);
        state.ema[idx] = cfg.ema_decay * state.ema[idx] + (1.0 - cfg.ema_decay) * state.params.data[idx];
    }
    state.params.validate()?;
    Ok(StepReport {
        loss,
        ks: draws.iter().map(|d| d.0).collect(),
        identity: draws.iter().map(|d| d.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    /// EMA-parameter loss on the validation items, when there are any.
    pub val_loss: Option<f64>,
}

/// Shuffled minibatch training for `cfg.epochs` epochs or `cfg.max_steps`
/// steps, whichever ends first. A trailing partial batch is dropped unless it
/// is the only one.
pub fn fit(
    items: &[TrainItem],
    val: &[TrainItem],
    arch: Architecture,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainState, TrainError> {
    cfg.check().map_err(TrainError::Data)?;
    if items.is_empty() {
        return Err(TrainError::Data("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState::new(DenoiserParams::init(arch, &mut rng)?);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let batch = cfg.batch.min(items.len());
    let done = |s: &TrainState| cfg.max_steps > 0 && s.step >= cfg.max_steps as u64;
    for epoch in 0..cfg.epochs {
        if done(&state) {
            break;
        }
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks_exact(batch) {
            if done(&state) {
                break;
            }
            let b: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            sum += train_step(&b, &mut state, cfg, schedule, &mut rng)?.loss;
            count += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(val, &state.ema_params(), cfg, schedule, seed ^ 0x5eed)?)
        };
        on_epoch(&EpochReport {
            epoch,
            step: state.step,
            train_loss: sum / count.max(1) as f64,
            val_loss,
        });
    }
    Ok(state)
}

/// Mean loss on `items` at fixed `(k, eps)` draws from `seed`, without dropout.
pub fn evaluate_loss(
    items: &[TrainItem],
    params: &DenoiserParams,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64, DenoiserError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = params.arch.horizon;
    let mut total = 0.0;
    let mut used = 0;
    for item in items.iter().filter(|i| !i.target.is_empty()) {
        let k = rng.random_range(1..=schedule.steps());
        let eps = gaussian_rows(&mut rng, item.target.len(), 2 * horizon);
        let noisy = forward_noise(&item.target, k, schedule, &eps);
        let out = crate::denoiser::denoise(
            &DenoiserInput {
                noisy: &noisy,
                features: &item.features,
                k,
                alpha_bar: schedule.alpha_bar(k),
                mask: &item.mask,
            },
            params,
        )?;
        total += item_loss(&out.actions, &item.target, cfg.yaw_reg).0;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

/// `(1 - w) uncond + w cond` on rows with `rho[i]`; `cond` elsewhere.
pub fn cfg_combine(cond: &[Vec<f64>], uncond: &[Vec<f64>], w: f64, rho: &[bool]) -> Vec<Vec<f64>> {
    cond.iter()
        .zip(uncond)
        .zip(rho)
        .map(|((c, u), &r)| {
            if r {
                c.iter().zip(u).map(|(c, u)| (1.0 - w) * u + w * c).collect()
            } else {
                c.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Ttc,
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ttc" => Ok(Self::Ttc),
            "none" => Ok(Self::None),
            other => Err(format!("unknown mask mode '{other}' (expected ttc or none)")),
        }
    }
}

/// Which graph the conditional branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    Graph,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub w: f64,
    pub n_c: usize,
    pub c_ttc: f64,
    pub d_max: f64,
    pub guidance: GuidanceSpec,
    pub seed: u64,
    pub ranking: RankingMode,
    pub mask: MaskMode,
    pub conditioning: ConditioningMode,
    /// When false every agent receives cost-gradient steering regardless of rank.
    pub guidance_masking: bool,
    /// Compute the graph and rank once at k = K and reuse them.
    pub freeze_graph: bool,
    pub dynamics: DynamicsConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            w: 1.5,
            n_c: 2,
            c_ttc: 3.0,
            d_max: 50.0,
            guidance: GuidanceSpec::default(),
            seed: 0,
            ranking: RankingMode::Causal,
            mask: MaskMode::Ttc,
            conditioning: ConditioningMode::Graph,
            guidance_masking: true,
            freeze_graph: false,
            dynamics: DynamicsConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn check(&self, n_agents: usize) -> Result<(), String> {
        if !(1.0..2.0).contains(&self.w) {
            return Err(format!("guidance scale w must be in [1, 2), got {}", self.w));
        }
        if !(self.c_ttc > 0.0) || !(self.d_max > 0.0) {
            return Err("c_ttc and d_max must be positive".into());
        }
        self.guidance.check(n_agents)
    }

    /// Plain conditional sampling: no ranking-dependent extrapolation, no steering.
    pub fn unguided(seed: u64) -> Self {
        Self {
            w: 1.0,
            guidance: GuidanceSpec::empty(),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error("guidance failed at denoising step {k}: {source}")]
    Guidance { k: usize, source: GuidanceError },
    #[error("dynamics failed at denoising step {k}: {source}")]
    Dynamics { k: usize, source: DynamicsError },
}

/// Running totals of per-agent gradient-conflict checks across denoising steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConflictTally {
    pub considered: usize,
    pub conflicted: usize,
}

impl ConflictTally {
    pub fn fraction(&self) -> f64 {
        if self.considered == 0 {
            0.0
        } else {
            self.conflicted as f64 / self.considered as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Agents that had `rho = true` at some denoising step.
    pub controlled: Vec<bool>,
    pub last_graph: Option<DecisionCausalGraph>,
    pub last_rank: Option<CausalRank>,
    pub conflicts: ConflictTally,
}

fn step_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn guided_sample(
    scene: &Scene,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Trajectory, SampleError> {
    guided_sample_with_report(scene, denoiser, schedule, cfg).map(|(t, _)| t)
}

/// Reverse diffusion from `x_K ~ N(0, I)`; per step: unconditional pass and
/// graph extraction, ranking, conditional pass, classifier-free combination on
/// ranked rows, posterior step, and cost-gradient steering of ranked agents.
pub fn guided_sample_with_report(
    scene: &Scene,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Trajectory, SampleReport), SampleError> {
    let n = scene.num_agents();
    cfg.check(n).map_err(SampleError::Config)?;
    let horizon = denoiser.horizon();
    let scale = denoiser.scale();
    let states = scene.current_states();
    let ctx = GuidanceContext::new(states.clone(), &scene.map, scene.dt, cfg.dynamics);
    let features = SceneFeatures::from_scene(scene, denoiser.history_len(), &ctx.sdf);
    let base_mask = match cfg.mask {
        MaskMode::Ttc => ttc_mask_states(&states, cfg.c_ttc, cfg.d_max),
        MaskMode::None => full_mask(n),
    };
    let identity = identity_mask(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = gaussian_rows(&mut rng, n, 2 * horizon);
    let mut report = SampleReport {
        controlled: vec![false; n],
        last_graph: None,
        last_rank: None,
        conflicts: ConflictTally::default(),
    };
    let mut frozen: Option<(DecisionCausalGraph, CausalRank)> = None;
    for k in (1..=schedule.steps()).rev() {
        let ab = schedule.alpha_bar(k);
        let input = |mask| DenoiserInput {
            noisy: &x,
            features: &features,
            k,
            alpha_bar: ab,
            mask,
        };
        let uncond = denoiser.denoise(&input(&identity))?;
        let (graph, rank) = match &frozen {
            Some(f) => f.clone(),
            None => {
                let g = build_dcg(&base_mask, &uncond.logits)?;
                let r = rank_agents(cfg.ranking, &g, &states, cfg.n_c, step_seed(cfg.seed, k));
                (g, r)
            }
        };
        if cfg.freeze_graph && frozen.is_none() {
            frozen = Some((graph.clone(), rank.clone()));
        }
        let cond_mask = match cfg.conditioning {
            ConditioningMode::Graph => &graph.mask,
            ConditioningMode::Identity => &identity,
        };
        let cond = if *cond_mask == identity {
            uncond.actions.clone()
        } else {
            denoiser.denoise(&input(cond_mask))?.actions
        };
        let x0 = cfg_combine(&cond, &uncond.actions, cfg.w, &rank.rho);
        let (c0, ck) = schedule.posterior_coefficients(k);
        let mut next: Vec<Vec<f64>> = x0
            .iter()
            .zip(&x)
            .map(|(a, b)| a.iter().zip(b).map(|(a, b)| c0 * a + ck * b).collect())
            .collect();
        if k > 1 {
            let sigma = schedule.sigmas[k - 1];
            let z = gaussian_rows(&mut rng, n, 2 * horizon);
            for (row, zr) in next.iter_mut().zip(&z) {
                for (v, e) in row.iter_mut().zip(zr) {
                    *v += sigma * e;
                }
            }
        }
        let steer: Vec<bool> = if cfg.guidance_masking {
            rank.rho.clone()
        } else {
            vec![true; n]
        };
        if cfg.guidance.is_active() && steer.iter().any(|&s| s) {
            let actions = scale.denormalize(&next, horizon);
            let out = masked_guidance_update(&actions, &steer, &cfg.guidance, &ctx)
                .map_err(|source| SampleError::Guidance { k, source })?;
            if let Some(dir) = &out.initial_direction {
                let realism: Vec<Vec<f64>> = x0
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a.iter().zip(b).map(|(a, b)| ab.sqrt() * a - b).collect())
                    .collect();
                let reward: Vec<Vec<f64>> = (0..n)
                    .map(|i| (0..2 * horizon).map(|c| dir[c / 2][i][c % 2] * scale.get(c % 2)).collect())
                    .collect();
                let stats = conflict_diagnostics(&realism, &reward)?;
                report.conflicts.considered += stats.considered;
                report.conflicts.conflicted += stats.conflicted;
            }
            for t in 0..horizon {
                for i in 0..n {
                    if !steer[i] {
                        continue;
                    }
                    let (new, old) = (out.actions[t][i], actions[t][i]);
                    next[i][2 * t] += (new.accel - old.accel) / scale.accel;
                    next[i][2 * t + 1] += (new.yaw_rate - old.yaw_rate) / scale.yaw_rate;
                }
            }
        }
        for (c, r) in report.controlled.iter_mut().zip(&rank.rho) {
            *c |= *r || (!cfg.guidance_masking && cfg.guidance.is_active());
        }
        report.last_graph = Some(graph);
        report.last_rank = Some(rank);
        x = next;
    }
    let actions = scale.denormalize(&x, horizon);
    let traj = rollout(&states, &actions, scene.dt, &cfg.dynamics).map_err(|source| SampleError::Dynamics { k: 0, source })?;
    Ok((traj, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_map, make_scene, Layout, SceneGenConfig};
    use crate::denoiser::ZeroDenoiser;

    #[test]
    fn schedule_invariants() {
        for s in [NoiseSchedule::cosine(100), NoiseSchedule::linear(100, 1e-4, 0.02)] {
            assert_eq!(s.steps(), 100);
            let mut acc = 1.0;
            for k in 0..100 {
                assert!(s.betas[k] > 0.0 && s.betas[k] < 1.0);
                acc *= 1.0 - s.betas[k];
                assert!((s.alpha_bars[k] - acc).abs() < 1e-15);
                assert!((s.sigmas[k].powi(2) - s.betas[k]).abs() < 1e-15);
                if k > 0 {
                    assert!(s.alpha_bars[k] < s.alpha_bars[k - 1]);
                }
            }
        }
    }

    #[test]
    fn posterior_coefficients_recover_clean_sample_at_k1() {
        let s = NoiseSchedule::cosine(100);
        let (c0, ck) = s.posterior_coefficients(1);
        assert!((c0 - 1.0).abs() < 1e-12 && ck.abs() < 1e-12);
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = NoiseSchedule::cosine(10);
        let x = vec![vec![0.3, -1.0]];
        let e = vec![vec![0.5, 2.0]];
        assert_eq!(forward_noise(&x, 0, &s, &e), x);
        let z = forward_noise(&[vec![0.0, 0.0]], 4, &s, &e);
        let b = (1.0 - s.alpha_bar(4)).sqrt();
        assert_eq!(z, vec![vec![b * 0.5, b * 2.0]]);
    }

    #[test]
    fn combine_cases() {
        let c = vec![vec![2.0, 1.0], vec![4.0, 0.0]];
        let u = vec![vec![0.0, 3.0], vec![1.0, 1.0]];
        assert_eq!(cfg_combine(&c, &u, 1.0, &[true, true]), c);
        assert_eq!(cfg_combine(&c, &u, 0.0, &[true, true]), u);
        assert_eq!(cfg_combine(&c, &u, 1.5, &[true, false])[0][0], 3.0);
        assert_eq!(cfg_combine(&c, &u, 1.5, &[true, false])[1], c[1]);
    }

    #[test]
    fn item_loss_perfect_prediction_is_yaw_term() {
        let t = vec![vec![1.0, 0.5, -1.0, -0.5]];
        let (l, _) = item_loss(&t, &t, 0.1);
        assert!((l - 0.1 * (0.25 + 0.25) / 2.0).abs() < 1e-15);
    }

    fn small_samples(n: usize) -> Vec<SceneSample> {
        let map = make_map(Layout::Crossroads, 5.5, 120.0);
        let cfg = SceneGenConfig {
            future_steps: 12,
            history_steps: 4,
            ..SceneGenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n).map(|_| make_scene(&map, 3, &mut rng, &cfg).unwrap()).collect()
    }

    #[test]
    fn p_uncond_one_uses_identity_everywhere() {
        let arch = Architecture {
            history_len: 4,
            horizon: 8,
            d_model: 8,
            history_hidden: 8,
            rel_hidden: 4,
            heads: 2,
            layers: 2,
            head_hidden: 8,
        };
        let samples = small_samples(3);
        let cfg = TrainConfig {
            p_uncond: 1.0,
            window_stride: 2,
            ..TrainConfig::default()
        };
        let items = training_items(&samples, 4, 8, &ActionScale::default(), &cfg);
        assert_eq!(items.len(), 3 * 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = TrainState::new(DenoiserParams::init(arch, &mut rng).unwrap());
        let refs: Vec<&TrainItem> = items.iter().collect();
        let rep = train_step(&refs, &mut state, &cfg, &NoiseSchedule::cosine(20), &mut rng).unwrap();
        assert!(rep.identity.iter().all(|&b| b));
        assert!(rep.loss.is_finite());
        assert!(rep.ks.iter().all(|&k| (1..=20).contains(&k)));
    }

    #[test]
    fn zero_denoiser_sample_is_deterministic_and_feasible() {
        let s = small_samples(1).remove(0);
        let den = ZeroDenoiser { horizon: 10 };
        let sched = NoiseSchedule::cosine(10);
        let cfg = SamplerConfig {
            seed: 9,
            ..SamplerConfig::default()
        };
        let a = guided_sample(&s.scene, &den, &sched, &cfg).unwrap();
        let b = guided_sample(&s.scene, &den, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.horizon(), 10);
        assert!(matches!(
            guided_sample(&s.scene, &den, &sched, &SamplerConfig { w: 2.5, ..cfg }),
            Err(SampleError::Config(_))
        ));
    }
}
