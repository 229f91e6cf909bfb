//! Scene encoder that predicts clean actions from noisy ones.
//!
//! The learned network embeds each agent's history with an MLP (plus a
//! sinusoidal embedding of the diffusion step), lets every agent attend over
//! tokens `[e_j ; g(r_ij)]` of the agents its conditioning mask admits, and
//! decodes `[z_i ; map_i ; x_i]` into a `2T` action vector. Keys and values
//! only ever come from history tokens, so agent `i`'s output depends on agent
//! `j` exactly when `mask[i][j]` holds.
//!
//! Actions are handled in a normalized, agent-major layout: one row of length
//! `2T` per agent, `[accel_0, yaw_0, accel_1, yaw_1, ...]` divided by the
//! [`ActionScale`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{compute_ttc, BoolMatrix};
use crate::lanes;
use crate::scenario::{normalize_angle, Action, AgentState, MapModel, Scene};
use crate::sdf::SignedDistanceField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("input shape: {0}")]
    Shape(String),
}

pub const REL_DIM: usize = 6;
pub const MAP_DIM: usize = 11;
pub const STEP_EMB_DIM: usize = 16;
pub const TTC_CAP: f64 = 20.0;

/// Per-component standard deviations used to normalize actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Default for ActionScale {
    fn default() -> Self {
        Self {
            accel: 1.0,
            yaw_rate: 1.0,
        }
    }
}

impl ActionScale {
    /// Root-mean-square of each component, floored to keep the scale usable.
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Self {
        let (mut sa, mut sr, mut n) = (0.0, 0.0, 0usize);
        for a in actions {
            sa += a.accel * a.accel;
            sr += a.yaw_rate * a.yaw_rate;
            n += 1;
        }
        let n = n.max(1) as f64;
        Self {
            accel: (sa / n).sqrt().max(0.05),
            yaw_rate: (sr / n).sqrt().max(0.01),
        }
    }

    pub fn get(&self, component: usize) -> f64 {
        if component == 0 {
            self.accel
        } else {
            self.yaw_rate
        }
    }

    /// `[T][N]` physical actions to `[N][2T]` normalized rows.
    pub fn normalize(&self, actions: &[Vec<Action>]) -> Vec<Vec<f64>> {
        let n = actions.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| {
                actions
                    .iter()
                    .flat_map(|row| [row[i].accel / self.accel, row[i].yaw_rate / self.yaw_rate])
                    .collect()
            })
            .collect()
    }

    /// Inverse of [`ActionScale::normalize`].
    pub fn denormalize(&self, rows: &[Vec<f64>], horizon: usize) -> Vec<Vec<Action>> {
        (0..horizon)
            .map(|t| {
                rows.iter()
                    .map(|r| Action::new(r[2 * t] * self.accel, r[2 * t + 1] * self.yaw_rate))
                    .collect()
            })
            .collect()
    }
}

/// Relative position and velocity of `j` in `i`'s frame, distance, and TTC
/// capped at [`TTC_CAP`]. The self pair yields all zeros.
pub fn relative_features(states: &[AgentState], i: usize, j: usize) -> [f64; REL_DIM] {
    if i == j {
        return [0.0; REL_DIM];
    }
    let (a, b) = (&states[i], &states[j]);
    let (s, c) = a.heading.sin_cos();
    let rot = |x: f64, y: f64| (c * x + s * y, -s * x + c * y);
    let (px, py) = rot(b.x - a.x, b.y - a.y);
    let (va, vb) = (a.velocity(), b.velocity());
    let (vx, vy) = rot(vb.0 - va.0, vb.1 - va.1);
    let ttc = compute_ttc(a, b).min(TTC_CAP);
    [px, py, vx, vy, px.hypot(py), ttc]
}

/// `4H` features of a history expressed in the frame of its last state.
/// Shorter histories are front-padded with their first state.
pub fn history_features(history: &[AgentState], len: usize) -> Vec<f64> {
    let cur = history.last().expect("nonempty history");
    let (s, c) = cur.heading.sin_cos();
    let skip = history.len().saturating_sub(len);
    let pad = len.saturating_sub(history.len());
    let rows = std::iter::repeat_n(&history[0], pad).chain(&history[skip..]);
    rows.flat_map(|h| {
        let (dx, dy) = (h.x - cur.x, h.y - cur.y);
        [
            (c * dx + s * dy) / 10.0,
            (-s * dx + c * dy) / 10.0,
            normalize_angle(h.heading - cur.heading),
            h.speed / 10.0,
        ]
    })
    .collect()
}

/// Local map summary for one agent: SDF, drivable fraction around it, offset
/// and heading relative to the best-aligned lane, and three lookahead points
/// on that lane in the agent frame.
pub fn map_features(map: &MapModel, sdf: &SignedDistanceField, st: &AgentState) -> Vec<f64> {
    let (s, c) = st.heading.sin_cos();
    let to_world = |fx: f64, fy: f64| (st.x + c * fx - s * fy, st.y + s * fx + c * fy);
    let mut out = Vec::with_capacity(MAP_DIM);
    out.push((sdf.sample(st.x, st.y).0 / 5.0).clamp(-4.0, 4.0));
    let mut hits = 0usize;
    for a in -4..=4 {
        for b in -4..=4 {
            let (x, y) = to_world(a as f64 * 1.5, b as f64);
            hits += map.drivable.is_drivable(x, y) as usize;
        }
    }
    out.push(hits as f64 / 81.0);
    let best = map
        .lanes
        .iter()
        .map(|l| (l, lanes::project(l, st.x, st.y)))
        .min_by(|(_, p), (_, q)| {
            let score = |p: &lanes::Projection| p.distance + 4.0 * (1.0 - (p.heading - st.heading).cos());
            score(p).total_cmp(&score(q))
        });
    match best {
        Some((lane, p)) => {
            out.push((p.lateral / 5.0).clamp(-4.0, 4.0));
            let dh = p.heading - st.heading;
            out.push(dh.sin());
            out.push(dh.cos());
            for ahead in [5.0, 10.0, 20.0] {
                let (q, _) = lanes::point_at(lane, p.s + ahead);
                let (dx, dy) = (q[0] - st.x, q[1] - st.y);
                out.push((c * dx + s * dy) / 20.0);
                out.push((-s * dx + c * dy) / 20.0);
            }
        }
        None => out.resize(MAP_DIM, 0.0),
    }
    out
}

/// Everything the network reads from a scene apart from the noisy actions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub history: Vec<Vec<f64>>,
    pub relative: Vec<Vec<[f64; REL_DIM]>>,
    pub map: Vec<Vec<f64>>,
}

impl SceneFeatures {
    pub fn from_scene(scene: &Scene, history_len: usize, sdf: &SignedDistanceField) -> Self {
        let states = scene.current_states();
        let n = states.len();
        Self {
            history: scene.agents.iter().map(|a| history_features(&a.history, history_len)).collect(),
            relative: (0..n).map(|i| (0..n).map(|j| relative_features(&states, i, j)).collect()).collect(),
            map: states.iter().map(|s| map_features(&scene.map, sdf, s)).collect(),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.history.len()
    }
}

pub struct DenoiserInput<'a> {
    /// `[N][2T]` normalized noisy actions.
    pub noisy: &'a [Vec<f64>],
    pub features: &'a SceneFeatures,
    pub k: usize,
    pub alpha_bar: f64,
    /// Conditioning graph support; the identity matrix is the unconditional branch.
    pub mask: &'a BoolMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    /// `[N][2T]` predicted clean actions, normalized.
    pub actions: Vec<Vec<f64>>,
    /// Unmasked first-layer attention logits, head-averaged, `[N][N]`.
    pub logits: Vec<Vec<f64>>,
}

pub trait Denoiser: Send + Sync {
    fn horizon(&self) -> usize;
    fn history_len(&self) -> usize;
    fn scale(&self) -> ActionScale;
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<DenoiserOutput, DenoiserError>;
}

fn check_input(input: &DenoiserInput<'_>, horizon: usize) -> Result<usize, DenoiserError> {
    let n = input.features.num_agents();
    if input.noisy.len() != n || input.noisy.iter().any(|r| r.len() != 2 * horizon) {
        return Err(DenoiserError::Shape(format!("noisy actions must be {n} rows of {}", 2 * horizon)));
    }
    if input.mask.len() != n || input.mask.iter().any(|r| r.len() != n) {
        return Err(DenoiserError::Shape(format!("mask must be {n}x{n}")));
    }
    Ok(n)
}

/// Posterior mean under an independent Gaussian prior `N(mean, std^2)` on
/// every clean action coordinate. Ignores the graph; logits are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDenoiser {
    pub horizon: usize,
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl AnalyticDenoiser {
    pub fn posterior_mean(&self, x: f64, component: usize, alpha_bar: f64) -> f64 {
        let (mu, s2) = (self.mean[component], self.std[component].powi(2));
        let gain = alpha_bar.sqrt() * s2 / (alpha_bar * s2 + 1.0 - alpha_bar);
        mu + gain * (x - alpha_bar.sqrt() * mu)
    }
}

impl Denoiser for AnalyticDenoiser {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn history_len(&self) -> usize {
        1
    }
    fn scale(&self) -> ActionScale {
        ActionScale::default()
    }
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<DenoiserOutput, DenoiserError> {
        let n = check_input(input, self.horizon)?;
        let actions = input
            .noisy
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(c, &x)| self.posterior_mean(x, c % 2, input.alpha_bar))
                    .collect()
            })
            .collect();
        Ok(DenoiserOutput {
            actions,
            logits: vec![vec![0.0; n]; n],
        })
    }
}

/// Always predicts zero actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroDenoiser {
    pub horizon: usize,
}

impl Denoiser for ZeroDenoiser {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn history_len(&self) -> usize {
        1
    }
    fn scale(&self) -> ActionScale {
        ActionScale::default()
    }
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<DenoiserOutput, DenoiserError> {
        let n = check_input(input, self.horizon)?;
        Ok(DenoiserOutput {
            actions: vec![vec![0.0; 2 * self.horizon]; n],
            logits: vec![vec![0.0; n]; n],
        })
    }
}

/// Single-head masked attention: `out_i = sum_j alpha_ij v_ij` with
/// `alpha_i = softmax_{j : mask[i][j]}(q_i . k_ij / sqrt(d))`. Also returns
/// the weights (zero off the mask).
pub fn masked_attention_weights(
    q: &[Vec<f64>],
    k: &[Vec<Vec<f64>>],
    v: &[Vec<Vec<f64>>],
    mask: &BoolMatrix,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = q.len();
    let d = q.first().map_or(0, Vec::len);
    let dv = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let inv = 1.0 / (d.max(1) as f64).sqrt();
    let mut out = vec![vec![0.0; dv]; n];
    let mut alpha = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if mask[i][j] {
                let s = dot(&q[i], &k[i][j]) * inv;
                alpha[i][j] = s;
                max = max.max(s);
            }
        }
        let mut z = 0.0;
        for j in 0..n {
            if mask[i][j] {
                alpha[i][j] = (alpha[i][j] - max).exp();
                z += alpha[i][j];
            }
        }
        for j in 0..n {
            if mask[i][j] {
                alpha[i][j] /= z;
                for (o, x) in out[i].iter_mut().zip(&v[i][j]) {
                    *o += alpha[i][j] * x;
                }
            }
        }
    }
    (out, alpha)
}

pub fn masked_attention(
    q: &[Vec<f64>],
    k: &[Vec<Vec<f64>>],
    v: &[Vec<Vec<f64>>],
    mask: &BoolMatrix,
) -> Vec<Vec<f64>> {
    masked_attention_weights(q, k, v, mask).0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize) -> [f64; STEP_EMB_DIM] {
    let mut e = [0.0; STEP_EMB_DIM];
    let half = STEP_EMB_DIM / 2;
    for m in 0..half {
        let freq = (-(1000f64.ln()) * m as f64 / half as f64).exp();
        let (s, c) = (k as f64 * freq).sin_cos();
        e[2 * m] = s;
        e[2 * m + 1] = c;
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub history_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub history_hidden: usize,
    pub rel_hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub head_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            history_len: 31,
            horizon: 52,
            d_model: 64,
            history_hidden: 64,
            rel_hidden: 16,
            heads: 2,
            layers: 2,
            head_hidden: 128,
        }
    }
}

impl Architecture {
    /// Head input: `[z ; map ; x ; sqrt(abar) ; sqrt(1 - abar)]`.
    fn head_in(&self) -> usize {
        self.d_model + MAP_DIM + 2 * self.horizon + 2
    }

    fn kv_dim(&self) -> usize {
        self.d_model + self.rel_hidden
    }

    pub fn check(&self) -> Result<(), DenoiserError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(DenoiserError::BadParams(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.history_len == 0 || self.horizon == 0 || self.d_model == 0 {
            return Err(DenoiserError::BadParams("zero-sized architecture".into()));
        }
        Ok(())
    }

    /// Tensor names and shapes in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, [usize; 2])> {
        let (d, kv) = (self.d_model, self.kv_dim());
        let mut v = vec![
            ("hist.w1".to_string(), [self.history_hidden, 4 * self.history_len]),
            ("hist.b1".into(), [self.history_hidden, 1]),
            ("hist.w2".into(), [d, self.history_hidden]),
            ("hist.b2".into(), [d, 1]),
            ("step.w".into(), [d, STEP_EMB_DIM]),
            ("rel.w".into(), [self.rel_hidden, REL_DIM]),
            ("rel.b".into(), [self.rel_hidden, 1]),
        ];
        for l in 0..self.layers {
            v.push((format!("attn{l}.wq"), [d, d]));
            v.push((format!("attn{l}.wk"), [d, kv]));
            v.push((format!("attn{l}.wv"), [d, kv]));
            v.push((format!("attn{l}.wo"), [d, d]));
            v.push((format!("attn{l}.bo"), [d, 1]));
        }
        v.push(("head.w3".into(), [self.head_hidden, self.head_in()]));
        v.push(("head.b3".into(), [self.head_hidden, 1]));
        v.push(("head.w4".into(), [2 * self.horizon, self.head_hidden]));
        v.push(("head.b4".into(), [2 * self.horizon, 1]));
        v.push(("head.skip".into(), [2 * self.horizon, 1]));
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s[0] * s[1]).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ws: usize,
    wr: usize,
    br: usize,
    layers: Vec<LayerOffsets>,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    skip: usize,
}

impl Offsets {
    fn new(arch: &Architecture) -> Self {
        let shapes = arch.tensor_shapes();
        let mut at = std::collections::HashMap::new();
        let mut off = 0;
        for (name, s) in &shapes {
            at.insert(name.clone(), off);
            off += s[0] * s[1];
        }
        let g = |n: &str| at[n];
        Self {
            w1: g("hist.w1"),
            b1: g("hist.b1"),
            w2: g("hist.w2"),
            b2: g("hist.b2"),
            ws: g("step.w"),
            wr: g("rel.w"),
            br: g("rel.b"),
            layers: (0..arch.layers)
                .map(|l| LayerOffsets {
                    wq: g(&format!("attn{l}.wq")),
                    wk: g(&format!("attn{l}.wk")),
                    wv: g(&format!("attn{l}.wv")),
                    wo: g(&format!("attn{l}.wo")),
                    bo: g(&format!("attn{l}.bo")),
                })
                .collect(),
            w3: g("head.w3"),
            b3: g("head.b3"),
            w4: g("head.w4"),
            b4: g("head.b4"),
            skip: g("head.skip"),
        }
    }
}

/// Flat parameter vector of the scene encoder plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub data: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self, DenoiserError> {
        arch.check()?;
        let mut data = Vec::with_capacity(arch.num_params());
        for (name, [rows, cols]) in arch.tensor_shapes() {
            let count = rows * cols;
            let std = if cols == 1 {
                0.0
            } else if name.ends_with(".wo") {
                0.5 / (cols as f64).sqrt()
            } else if name == "head.w4" {
                0.2 / (cols as f64).sqrt()
            } else {
                1.0 / (cols as f64).sqrt()
            };
            if name == "head.skip" {
                data.extend(std::iter::repeat_n(1.0, count));
            } else {
                data.extend((0..count).map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                }));
            }
        }
        Ok(Self { arch, data })
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        self.arch.check()?;
        if self.data.len() != self.arch.num_params() {
            return Err(DenoiserError::BadParams(format!(
                "expected {} parameters, found {}",
                self.arch.num_params(),
                self.data.len()
            )));
        }
        if let Some(k) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(DenoiserError::BadParams(format!("non-finite parameter at index {k}")));
        }
        Ok(())
    }

    /// Zero the final projection, its bias and the skip gain.
    pub fn zero_output_head(&mut self) {
        let off = Offsets::new(&self.arch);
        let t2 = 2 * self.arch.horizon;
        self.data[off.w4..off.w4 + t2 * self.arch.head_hidden].fill(0.0);
        self.data[off.b4..off.b4 + t2].fill(0.0);
        self.data[off.skip..off.skip + t2].fill(0.0);
    }

    pub fn tensors(&self) -> Vec<TensorDump> {
        let mut off = 0;
        self.arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape[0] * shape[1];
                let t = TensorDump {
                    name,
                    shape,
                    data: self.data[off..off + len].to_vec(),
                };
                off += len;
                t
            })
            .collect()
    }

    pub fn from_tensors(arch: Architecture, tensors: &[TensorDump]) -> Result<Self, DenoiserError> {
        arch.check()?;
        let shapes = arch.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(DenoiserError::BadParams(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut data = Vec::with_capacity(arch.num_params());
        for ((name, shape), t) in shapes.iter().zip(tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape[0] * shape[1] {
                return Err(DenoiserError::BadParams(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    t.name, t.shape, name, shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let p = Self { arch, data };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: architecture, action scale and named tensors with shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Architecture,
    pub scale: ActionScale,
    pub tensors: Vec<TensorDump>,
}

impl Checkpoint {
    pub fn new(params: &DenoiserParams, scale: ActionScale) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: params.arch,
            scale,
            tensors: params.tensors(),
        }
    }

    pub fn into_denoiser(self) -> Result<SceneEncoder, DenoiserError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(DenoiserError::BadParams(format!("unsupported checkpoint version {}", self.version)));
        }
        SceneEncoder::new(DenoiserParams::from_tensors(self.arch, &self.tensors)?, self.scale)
    }
}

// y = W x (+ existing contents of y)
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    for (r, yr) in y.iter_mut().enumerate().take(rows) {
        *yr += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

// dx += W^T dy
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for (d, wv) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *d += g * wv;
        }
    }
}

// dW += dy x^T
fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

fn affine(p: &[f64], w: usize, b: Option<usize>, rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = match b {
        Some(b) => p[b..b + rows].to_vec(),
        None => vec![0.0; rows],
    };
    matvec_acc(&p[w..w + rows * cols], rows, cols, x, &mut y);
    y
}

const REL_SCALE: [f64; REL_DIM] = [0.1, 0.1, 0.1, 0.1, 0.1, 1.0 / TTC_CAP];

struct LayerCache {
    z_in: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    // per head, [N][N]
    alpha: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    tp: Vec<Vec<f64>>,
}

struct Cache {
    t1: Vec<Vec<f64>>,
    kv: Vec<Vec<Vec<f64>>>,
    rel_in: Vec<Vec<[f64; REL_DIM]>>,
    kemb: [f64; STEP_EMB_DIM],
    layers: Vec<LayerCache>,
    u: Vec<Vec<f64>>,
    t3: Vec<Vec<f64>>,
    sab: f64,
}

fn head_slice<T: Clone>(v: &[T], h: usize, dh: usize) -> Vec<T> {
    v[h * dh..(h + 1) * dh].to_vec()
}

fn forward(p: &DenoiserParams, input: &DenoiserInput<'_>) -> (DenoiserOutput, Cache) {
    let a = &p.arch;
    let off = Offsets::new(a);
    let w = &p.data;
    let n = input.features.num_agents();
    let (d, dr, kvd) = (a.d_model, a.rel_hidden, a.kv_dim());
    let (nh, dh) = (a.heads, a.d_model / a.heads);
    let t2 = 2 * a.horizon;
    let hist_in = 4 * a.history_len;
    let kemb = step_embedding(input.k);

    let mut t1 = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for i in 0..n {
        let mut h1 = affine(w, off.w1, Some(off.b1), a.history_hidden, hist_in, &input.features.history[i]);
        h1.iter_mut().for_each(|x| *x = x.tanh());
        let mut ei = affine(w, off.w2, Some(off.b2), d, a.history_hidden, &h1);
        matvec_acc(&w[off.ws..off.ws + d * STEP_EMB_DIM], d, STEP_EMB_DIM, &kemb, &mut ei);
        t1.push(h1);
        e.push(ei);
    }
    let rel_in: Vec<Vec<[f64; REL_DIM]>> = input
        .features
        .relative
        .iter()
        .map(|row| {
            row.iter()
                .map(|r| std::array::from_fn(|c| r[c] * REL_SCALE[c]))
                .collect()
        })
        .collect();
    let kv: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut g = affine(w, off.wr, Some(off.br), dr, REL_DIM, &rel_in[i][j]);
                    g.iter_mut().for_each(|x| *x = x.tanh());
                    let mut tok = e[j].clone();
                    tok.extend(g);
                    tok
                })
                .collect()
        })
        .collect();

    let mut z = e;
    let mut layers = Vec::with_capacity(a.layers);
    let mut logits = vec![vec![0.0; n]; n];
    let inv = 1.0 / (dh as f64).sqrt();
    for (l, lo) in off.layers.iter().enumerate() {
        let q: Vec<Vec<f64>> = z.iter().map(|zi| affine(w, lo.wq, None, d, d, zi)).collect();
        let mut kk = vec![vec![Vec::new(); n]; n];
        let mut vv = vec![vec![Vec::new(); n]; n];
        for i in 0..n {
            for j in 0..n {
                // first-layer keys are needed for every pair to report logits
                if input.mask[i][j] || l == 0 {
                    kk[i][j] = affine(w, lo.wk, None, d, kvd, &kv[i][j]);
                } else {
                    kk[i][j] = vec![0.0; d];
                }
                vv[i][j] = if input.mask[i][j] {
                    affine(w, lo.wv, None, d, kvd, &kv[i][j])
                } else {
                    vec![0.0; d]
                };
            }
        }
        if l == 0 {
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for h in 0..nh {
                        s += dot(&q[i][h * dh..(h + 1) * dh], &kk[i][j][h * dh..(h + 1) * dh]) * inv;
                    }
                    logits[i][j] = s / nh as f64;
                }
            }
        }
        let mut o = vec![vec![0.0; d]; n];
        let mut alpha = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh: Vec<Vec<f64>> = q.iter().map(|r| head_slice(r, h, dh)).collect();
            let kh: Vec<Vec<Vec<f64>>> = kk.iter().map(|r| r.iter().map(|x| head_slice(x, h, dh)).collect()).collect();
            let vh: Vec<Vec<Vec<f64>>> = vv.iter().map(|r| r.iter().map(|x| head_slice(x, h, dh)).collect()).collect();
            let (oh, ah) = masked_attention_weights(&qh, &kh, &vh, input.mask);
            for i in 0..n {
                o[i][h * dh..(h + 1) * dh].copy_from_slice(&oh[i]);
            }
            alpha.push(ah);
        }
        let mut tp = Vec::with_capacity(n);
        let z_in = z.clone();
        for i in 0..n {
            let mut pi = affine(w, lo.wo, Some(lo.bo), d, d, &o[i]);
            pi.iter_mut().for_each(|x| *x = x.tanh());
            for (zv, t) in z[i].iter_mut().zip(&pi) {
                *zv += t;
            }
            tp.push(pi);
        }
        layers.push(LayerCache {
            z_in,
            q,
            k: kk,
            v: vv,
            alpha,
            o,
            tp,
        });
    }

    let sab = input.alpha_bar.sqrt();
    let s1ab = (1.0 - input.alpha_bar).max(0.0).sqrt();
    let hin = a.head_in();
    let mut u = Vec::with_capacity(n);
    let mut t3 = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    for i in 0..n {
        let mut ui = z[i].clone();
        ui.extend_from_slice(&input.features.map[i]);
        ui.extend_from_slice(&input.noisy[i]);
        ui.push(sab);
        ui.push(s1ab);
        let mut h3 = affine(w, off.w3, Some(off.b3), a.head_hidden, hin, &ui);
        h3.iter_mut().for_each(|x| *x = x.tanh());
        let mut y = affine(w, off.w4, Some(off.b4), t2, a.head_hidden, &h3);
        for (c, yc) in y.iter_mut().enumerate() {
            *yc += w[off.skip + c] * sab * input.noisy[i][c];
        }
        u.push(ui);
        t3.push(h3);
        actions.push(y);
    }
    (
        DenoiserOutput { actions, logits },
        Cache {
            t1,
            kv,
            rel_in,
            kemb,
            layers,
            u,
            t3,
            sab,
        },
    )
}

/// Parameter gradient of `sum(output_grad . output)`, plus the gradient with
/// respect to the first-layer per-head attention logits summed over heads
/// (zero wherever the mask is false).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub params: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

fn backward(p: &DenoiserParams, input: &DenoiserInput<'_>, cache: &Cache, dy: &[Vec<f64>]) -> DenoiserGrads {
    let a = &p.arch;
    let off = Offsets::new(a);
    let w = &p.data;
    let n = input.features.num_agents();
    let (d, dr, kvd) = (a.d_model, a.rel_hidden, a.kv_dim());
    let (nh, dh) = (a.heads, a.d_model / a.heads);
    let t2 = 2 * a.horizon;
    let hin = a.head_in();
    let hist_in = 4 * a.history_len;
    let mut g = vec![0.0; p.data.len()];
    let mut dlogits = vec![vec![0.0; n]; n];

    let mut dz = vec![vec![0.0; d]; n];
    for i in 0..n {
        let dyi = &dy[i];
        for c in 0..t2 {
            g[off.skip + c] += dyi[c] * cache.sab * input.noisy[i][c];
        }
        outer_acc(&mut g[off.w4..off.w4 + t2 * a.head_hidden], t2, a.head_hidden, dyi, &cache.t3[i]);
        for c in 0..t2 {
            g[off.b4 + c] += dyi[c];
        }
        let mut da3 = vec![0.0; a.head_hidden];
        matvec_t_acc(&w[off.w4..off.w4 + t2 * a.head_hidden], t2, a.head_hidden, dyi, &mut da3);
        for (x, t) in da3.iter_mut().zip(&cache.t3[i]) {
            *x *= 1.0 - t * t;
        }
        outer_acc(&mut g[off.w3..off.w3 + a.head_hidden * hin], a.head_hidden, hin, &da3, &cache.u[i]);
        for (c, x) in da3.iter().enumerate() {
            g[off.b3 + c] += x;
        }
        let mut du = vec![0.0; hin];
        matvec_t_acc(&w[off.w3..off.w3 + a.head_hidden * hin], a.head_hidden, hin, &da3, &mut du);
        dz[i].copy_from_slice(&du[..d]);
    }

    let mut dkv = vec![vec![vec![0.0; kvd]; n]; n];
    let inv = 1.0 / (dh as f64).sqrt();
    for (l, lo) in off.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let mut do_ = vec![vec![0.0; d]; n];
        for i in 0..n {
            let dp: Vec<f64> = dz[i].iter().zip(&lc.tp[i]).map(|(g, t)| g * (1.0 - t * t)).collect();
            outer_acc(&mut g[lo.wo..lo.wo + d * d], d, d, &dp, &lc.o[i]);
            for (c, x) in dp.iter().enumerate() {
                g[lo.bo + c] += x;
            }
            matvec_t_acc(&w[lo.wo..lo.wo + d * d], d, d, &dp, &mut do_[i]);
        }
        let mut dq = vec![vec![0.0; d]; n];
        for i in 0..n {
            for h in 0..nh {
                let r = h * dh..(h + 1) * dh;
                let al = &lc.alpha[h][i];
                let doh = &do_[i][r.clone()];
                let mut dal = vec![0.0; n];
                let mut mean = 0.0;
                for j in 0..n {
                    if input.mask[i][j] {
                        dal[j] = dot(doh, &lc.v[i][j][r.clone()]);
                        mean += al[j] * dal[j];
                    }
                }
                for j in 0..n {
                    if !input.mask[i][j] {
                        continue;
                    }
                    let ds = al[j] * (dal[j] - mean);
                    if l == 0 {
                        dlogits[i][j] += ds;
                    }
                    let mut dk = vec![0.0; d];
                    let mut dv = vec![0.0; d];
                    for (c, rc) in r.clone().enumerate() {
                        dq[i][rc] += ds * lc.k[i][j][rc] * inv;
                        dk[rc] = ds * lc.q[i][rc] * inv;
                        dv[rc] = al[j] * doh[c];
                    }
                    outer_acc(&mut g[lo.wk..lo.wk + d * kvd], d, kvd, &dk, &cache.kv[i][j]);
                    outer_acc(&mut g[lo.wv..lo.wv + d * kvd], d, kvd, &dv, &cache.kv[i][j]);
                    matvec_t_acc(&w[lo.wk..lo.wk + d * kvd], d, kvd, &dk, &mut dkv[i][j]);
                    matvec_t_acc(&w[lo.wv..lo.wv + d * kvd], d, kvd, &dv, &mut dkv[i][j]);
                }
            }
        }
        for i in 0..n {
            outer_acc(&mut g[lo.wq..lo.wq + d * d], d, d, &dq[i], &lc.z_in[i]);
            matvec_t_acc(&w[lo.wq..lo.wq + d * d], d, d, &dq[i], &mut dz[i]);
        }
    }

    // dz now holds the gradient wrt z^0 = e
    let mut de = dz;
    for i in 0..n {
        for j in 0..n {
            if !input.mask[i][j] {
                continue;
            }
            let tok = &cache.kv[i][j];
            for c in 0..d {
                de[j][c] += dkv[i][j][c];
            }
            let dg: Vec<f64> = (0..dr).map(|c| dkv[i][j][d + c] * (1.0 - tok[d + c] * tok[d + c])).collect();
            outer_acc(&mut g[off.wr..off.wr + dr * REL_DIM], dr, REL_DIM, &dg, &cache.rel_in[i][j]);
            for (c, x) in dg.iter().enumerate() {
                g[off.br + c] += x;
            }
        }
    }
    for i in 0..n {
        outer_acc(&mut g[off.w2..off.w2 + d * a.history_hidden], d, a.history_hidden, &de[i], &cache.t1[i]);
        for c in 0..d {
            g[off.b2 + c] += de[i][c];
        }
        outer_acc(&mut g[off.ws..off.ws + d * STEP_EMB_DIM], d, STEP_EMB_DIM, &de[i], &cache.kemb);
        let mut da1 = vec![0.0; a.history_hidden];
        matvec_t_acc(&w[off.w2..off.w2 + d * a.history_hidden], d, a.history_hidden, &de[i], &mut da1);
        for (x, t) in da1.iter_mut().zip(&cache.t1[i]) {
            *x *= 1.0 - t * t;
        }
        outer_acc(&mut g[off.w1..off.w1 + a.history_hidden * hist_in], a.history_hidden, hist_in, &da1, &input.features.history[i]);
        for (c, x) in da1.iter().enumerate() {
            g[off.b1 + c] += x;
        }
    }
    DenoiserGrads {
        params: g,
        logits: dlogits,
    }
}

fn check_features(p: &DenoiserParams, input: &DenoiserInput<'_>) -> Result<(), DenoiserError> {
    check_input(input, p.arch.horizon)?;
    let f = input.features;
    let n = f.num_agents();
    if f.history.iter().any(|h| h.len() != 4 * p.arch.history_len)
        || f.map.len() != n
        || f.map.iter().any(|m| m.len() != MAP_DIM)
        || f.relative.len() != n
        || f.relative.iter().any(|r| r.len() != n)
    {
        return Err(DenoiserError::Shape("scene features do not match the architecture".into()));
    }
    Ok(())
}

/// Forward pass of the learned encoder.
pub fn denoise(input: &DenoiserInput<'_>, params: &DenoiserParams) -> Result<DenoiserOutput, DenoiserError> {
    params.validate()?;
    check_features(params, input)?;
    Ok(forward(params, input).0)
}

/// Vector-Jacobian product of [`denoise`] with `output_grad` (`[N][2T]`).
pub fn denoiser_backprop(
    input: &DenoiserInput<'_>,
    params: &DenoiserParams,
    output_grad: &[Vec<f64>],
) -> Result<DenoiserGrads, DenoiserError> {
    params.validate()?;
    check_features(params, input)?;
    if output_grad.len() != input.noisy.len() || output_grad.iter().any(|r| r.len() != 2 * params.arch.horizon) {
        return Err(DenoiserError::Shape("output gradient shape".into()));
    }
    let (_, cache) = forward(params, input);
    Ok(backward(params, input, &cache, output_grad))
}

/// One forward and backward pass sharing the cache; used by training.
pub(crate) fn forward_backward(
    input: &DenoiserInput<'_>,
    params: &DenoiserParams,
    grad_of: impl FnOnce(&DenoiserOutput) -> (f64, Vec<Vec<f64>>),
) -> (f64, Vec<f64>) {
    let (out, cache) = forward(params, input);
    let (loss, dy) = grad_of(&out);
    (loss, backward(params, input, &cache, &dy).params)
}

/// The learned encoder with validated, immutable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoder {
    pub params: DenoiserParams,
    pub scale: ActionScale,
}

impl SceneEncoder {
    pub fn new(params: DenoiserParams, scale: ActionScale) -> Result<Self, DenoiserError> {
        params.validate()?;
        Ok(Self { params, scale })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.params, self.scale)
    }
}

impl Denoiser for SceneEncoder {
    fn horizon(&self) -> usize {
        self.params.arch.horizon
    }
    fn history_len(&self) -> usize {
        self.params.arch.history_len
    }
    fn scale(&self) -> ActionScale {
        self.scale
    }
    fn denoise(&self, input: &DenoiserInput<'_>) -> Result<DenoiserOutput, DenoiserError> {
        check_features(&self.params, input)?;
        Ok(forward(&self.params, input).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{full_mask, identity_mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            history_len: 3,
            horizon: 4,
            d_model: 8,
            history_hidden: 6,
            rel_hidden: 4,
            heads: 2,
            layers: 2,
            head_hidden: 10,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, arch: &Architecture) -> SceneFeatures {
        let states: Vec<AgentState> = (0..n)
            .map(|_| {
                AgentState::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.0..10.0),
                )
            })
            .collect();
        SceneFeatures {
            history: (0..n)
                .map(|_| (0..4 * arch.history_len).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            relative: (0..n).map(|i| (0..n).map(|j| relative_features(&states, i, j)).collect()).collect(),
            map: (0..n).map(|_| (0..MAP_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> BoolMatrix {
        (0..n)
            .map(|i| (0..n).map(|j| i == j || rng.random_bool(0.5)).collect())
            .collect()
    }

    #[test]
    fn self_pair_and_hand_example() {
        let s = vec![AgentState::new(1.0, 2.0, 0.3, 4.0), AgentState::new(11.0, 2.0, 0.0, 5.0)];
        assert_eq!(relative_features(&s, 0, 0), [0.0; REL_DIM]);
        let s = vec![AgentState::new(0.0, 0.0, 0.0, 5.0), AgentState::new(10.0, 0.0, 0.0, 5.0)];
        let f = relative_features(&s, 0, 1);
        assert_eq!(f, [10.0, 0.0, 0.0, 0.0, 10.0, TTC_CAP]);
    }

    #[test]
    fn relative_features_rotation_invariant() {
        let s = vec![AgentState::new(1.0, 2.0, 0.3, 4.0), AgentState::new(8.0, -3.0, 2.0, 6.0)];
        let th: f64 = 0.9;
        let (sn, cs) = th.sin_cos();
        let rot: Vec<AgentState> = s
            .iter()
            .map(|a| AgentState::new(cs * a.x - sn * a.y, sn * a.x + cs * a.y, normalize_angle(a.heading + th), a.speed))
            .collect();
        let (f, g) = (relative_features(&s, 0, 1), relative_features(&rot, 0, 1));
        for c in 0..REL_DIM {
            assert!((f[c] - g[c]).abs() < 1e-9, "{c}: {} vs {}", f[c], g[c]);
        }
    }

    #[test]
    fn attention_special_cases_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (5, 3);
        let q = random_rows(&mut rng, n, d);
        let k: Vec<Vec<Vec<f64>>> = (0..n).map(|_| random_rows(&mut rng, n, d)).collect();
        let v: Vec<Vec<Vec<f64>>> = (0..n).map(|_| random_rows(&mut rng, n, d)).collect();
        let out = masked_attention(&q, &k, &v, &identity_mask(n));
        for i in 0..n {
            assert_eq!(out[i], v[i][i]);
        }
        let zeros = vec![vec![0.0; d]; n];
        let out = masked_attention(&zeros, &k, &v, &full_mask(n));
        for i in 0..n {
            for c in 0..d {
                let mean = (0..n).map(|j| v[i][j][c]).sum::<f64>() / n as f64;
                assert!((out[i][c] - mean).abs() < 1e-12);
            }
        }
        let mask = random_mask(&mut rng, n);
        let out = masked_attention(&q, &k, &v, &mask);
        // direct two-loop reference
        for i in 0..n {
            let mut w = vec![0.0; n];
            let mut z = 0.0;
            for j in 0..n {
                if mask[i][j] {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q[i][c] * k[i][j][c];
                    }
                    w[j] = (s / (d as f64).sqrt()).exp();
                    z += w[j];
                }
            }
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += w[j] / z * v[i][j][c];
                }
                assert!((out[i][c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_graph_blocks_other_histories() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DenoiserParams::init(arch, &mut rng).unwrap();
        let f = random_features(&mut rng, 4, &arch);
        let x = random_rows(&mut rng, 4, 2 * arch.horizon);
        let mask = identity_mask(4);
        let input = DenoiserInput {
            noisy: &x,
            features: &f,
            k: 7,
            alpha_bar: 0.6,
            mask: &mask,
        };
        let base = denoise(&input, &p).unwrap();
        let mut f2 = f.clone();
        f2.history[2].iter_mut().for_each(|v| *v += 0.7);
        // moving agent 2 changes every pair feature involving it
        for i in [0, 1, 3] {
            f2.relative[i][2][0] += 1.0;
            f2.relative[2][i][1] -= 1.0;
        }
        let input2 = DenoiserInput { features: &f2, ..input };
        let pert = denoise(&input2, &p).unwrap();
        assert_eq!(base.actions[0], pert.actions[0]);
        assert_eq!(base.actions[1], pert.actions[1]);
        assert_eq!(base.actions[3], pert.actions[3]);
        assert_ne!(base.actions[2], pert.actions[2]);
    }

    #[test]
    fn zero_head_gives_zero_actions() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = DenoiserParams::init(arch, &mut rng).unwrap();
        p.zero_output_head();
        let f = random_features(&mut rng, 3, &arch);
        let x = random_rows(&mut rng, 3, 2 * arch.horizon);
        let mask = full_mask(3);
        let out = denoise(
            &DenoiserInput {
                noisy: &x,
                features: &f,
                k: 50,
                alpha_bar: 0.3,
                mask: &mask,
            },
            &p,
        )
        .unwrap();
        assert!(out.actions.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_params_rejected() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = DenoiserParams::init(arch, &mut rng).unwrap();
        p.data[3] = f64::NAN;
        let f = random_features(&mut rng, 2, &arch);
        let x = random_rows(&mut rng, 2, 2 * arch.horizon);
        let mask = full_mask(2);
        let input = DenoiserInput {
            noisy: &x,
            features: &f,
            k: 1,
            alpha_bar: 0.9,
            mask: &mask,
        };
        assert!(matches!(denoise(&input, &p), Err(DenoiserError::BadParams(_))));
        assert!(matches!(denoiser_backprop(&input, &p, &x), Err(DenoiserError::BadParams(_))));
        assert!(SceneEncoder::new(p, ActionScale::default()).is_err());
    }

    #[test]
    fn analytic_matches_conjugate_posterior() {
        let den = AnalyticDenoiser {
            horizon: 2,
            mean: [1.0, -0.2],
            std: [0.1, 0.3],
        };
        let f = SceneFeatures {
            history: vec![vec![0.0; 4]],
            relative: vec![vec![[0.0; REL_DIM]]],
            map: vec![vec![0.0; MAP_DIM]],
        };
        let x = vec![vec![0.4, -1.0, 2.0, 0.1]];
        let ab: f64 = 0.37;
        let out = den
            .denoise(&DenoiserInput {
                noisy: &x,
                features: &f,
                k: 3,
                alpha_bar: ab,
                mask: &identity_mask(1),
            })
            .unwrap();
        for (c, &xv) in x[0].iter().enumerate() {
            // precision-weighted combination of the prior and the observation x = sqrt(ab) a + sqrt(1-ab) e
            let (mu, s2) = (den.mean[c % 2], den.std[c % 2].powi(2));
            let lik_prec = ab / (1.0 - ab);
            let post = (mu / s2 + lik_prec * xv / ab.sqrt()) / (1.0 / s2 + lik_prec);
            assert!((out.actions[0][c] - post).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = DenoiserParams::init(arch, &mut rng).unwrap();
        let scale = ActionScale {
            accel: 0.7,
            yaw_rate: 0.05,
        };
        let json = serde_json::to_string(&Checkpoint::new(&p, scale)).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let enc = back.into_denoiser().unwrap();
        assert_eq!(enc.params, p);
        assert_eq!(enc.scale, scale);
        let mut bad: Checkpoint = serde_json::from_str(&json).unwrap();
        bad.tensors[2].shape = [1, 1];
        assert!(bad.into_denoiser().is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grad() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DenoiserParams::init(arch, &mut rng).unwrap();
        let f = random_features(&mut rng, 3, &arch);
        let x = random_rows(&mut rng, 3, 2 * arch.horizon);
        let mask = random_mask(&mut rng, 3);
        let input = DenoiserInput {
            noisy: &x,
            features: &f,
            k: 4,
            alpha_bar: 0.5,
            mask: &mask,
        };
        let zero = vec![vec![0.0; 2 * arch.horizon]; 3];
        let g = denoiser_backprop(&input, &p, &zero).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_logit_grads_are_zero() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = DenoiserParams::init(arch, &mut rng).unwrap();
        let n = 5;
        let f = random_features(&mut rng, n, &arch);
        let x = random_rows(&mut rng, n, 2 * arch.horizon);
        let mask = random_mask(&mut rng, n);
        let dy = random_rows(&mut rng, n, 2 * arch.horizon);
        let g = denoiser_backprop(
            &DenoiserInput {
                noisy: &x,
                features: &f,
                k: 9,
                alpha_bar: 0.2,
                mask: &mask,
            },
            &p,
            &dy,
        )
        .unwrap();
        for i in 0..n {
            for j in 0..n {
                if !mask[i][j] {
                    assert_eq!(g.logits[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn action_scale_round_trip() {
        let acts = vec![vec![Action::new(1.0, 0.1), Action::new(-2.0, 0.0)], vec![Action::new(0.5, -0.2), Action::new(3.0, 0.3)]];
        let s = ActionScale::fit(acts.iter().flatten());
        let rows = s.normalize(&acts);
        assert_eq!(rows.len(), 2);
        let back = s.denormalize(&rows, 2);
        for (a, b) in acts.iter().flatten().zip(back.iter().flatten()) {
            assert!((a.accel - b.accel).abs() < 1e-12 && (a.yaw_rate - b.yaw_rate).abs() < 1e-12);
        }
    }
}
