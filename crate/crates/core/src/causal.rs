//! Interaction structure between agents: time-to-collision features, the
//! TTC memory mask, the decision causal graph `G = M ⊙ softmax(logits)`,
//! clique-based importance ranking and gradient-conflict statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::scenario::{AgentState, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CausalError {
    #[error("feature has zero variance")]
    DegenerateFeature,
    #[error("label has zero variance")]
    DegenerateLabel,
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Earliest `t >= 0` at which two constant-velocity discs overlap, or `+inf`.
pub fn compute_ttc(a: &AgentState, b: &AgentState) -> f64 {
    let (vax, vay) = a.velocity();
    let (vbx, vby) = b.velocity();
    let (px, py) = (b.x - a.x, b.y - a.y);
    let (vx, vy) = (vbx - vax, vby - vay);
    let r = a.radius() + b.radius();
    let pp = px * px + py * py;
    let c = pp - r * r;
    if c <= 0.0 {
        return 0.0;
    }
    let vv = vx * vx + vy * vy;
    if vv == 0.0 {
        return f64::INFINITY;
    }
    let pv = px * vx + py * vy;
    if pv >= 0.0 {
        return f64::INFINITY;
    }
    let disc = pv * pv - vv * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    // c > 0 and pv < 0 put both roots on the positive side; take the smaller.
    (-pv - disc.sqrt()) / vv
}

/// Boolean `N x N` matrix stored as rows.
pub type BoolMatrix = Vec<Vec<bool>>;

pub fn identity_mask(n: usize) -> BoolMatrix {
    (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
}

pub fn full_mask(n: usize) -> BoolMatrix {
    vec![vec![true; n]; n]
}

/// TTC memory mask over the scene's current states.
pub fn ttc_mask(scene: &Scene, c_ttc: f64, d_max: f64) -> BoolMatrix {
    ttc_mask_states(&scene.current_states(), c_ttc, d_max)
}

pub fn ttc_mask_states(states: &[AgentState], c_ttc: f64, d_max: f64) -> BoolMatrix {
    let n = states.len();
    let mut m = identity_mask(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&states[i], &states[j]);
            let dist = (b.x - a.x).hypot(b.y - a.y);
            let edge = dist <= d_max && compute_ttc(a, b) <= c_ttc;
            m[i][j] = edge;
            m[j][i] = edge;
        }
    }
    m
}

/// Number of true off-diagonal entries.
pub fn edge_count(mask: &BoolMatrix) -> usize {
    mask.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().filter(|&(j, &m)| m && i != j).count())
        .sum()
}

/// Weighted adjacency of who influences whose next action.
///
/// Row `i` holds the normalized attention of agent `i` over the agents
/// allowed by `mask[i]`; masked-out entries are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCausalGraph {
    pub weights: Vec<Vec<f64>>,
    pub mask: BoolMatrix,
}

impl DecisionCausalGraph {
    pub fn identity(n: usize) -> Self {
        Self {
            weights: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            mask: identity_mask(n),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.mask.len()
    }

    pub fn edge_count(&self) -> usize {
        edge_count(&self.mask)
    }
}

/// Masked row softmax of attention logits. The diagonal is always kept.
pub fn build_dcg(mask: &BoolMatrix, attn_logits: &[Vec<f64>]) -> Result<DecisionCausalGraph, CausalError> {
    let n = mask.len();
    if attn_logits.len() != n
        || mask.iter().any(|r| r.len() != n)
        || attn_logits.iter().any(|r| r.len() != n)
    {
        return Err(CausalError::Shape(format!(
            "mask is {n}x{n} but logits are {}x{}",
            attn_logits.len(),
            attn_logits.first().map_or(0, Vec::len)
        )));
    }
    let mut mask = mask.clone();
    for (i, row) in mask.iter_mut().enumerate() {
        row[i] = true;
    }
    let weights = mask
        .iter()
        .zip(attn_logits)
        .map(|(mrow, lrow)| masked_softmax(mrow, lrow))
        .collect();
    Ok(DecisionCausalGraph { weights, mask })
}

pub(crate) fn masked_softmax(mask: &[bool], logits: &[f64]) -> Vec<f64> {
    let max = mask
        .iter()
        .zip(logits)
        .filter(|(m, _)| **m)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = mask
        .iter()
        .zip(logits)
        .map(|(m, l)| if *m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= sum);
    out
}

/// Ordered agent importance and the controllability flags `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalRank {
    pub order: Vec<usize>,
    pub rho: Vec<bool>,
    pub occurrences: Vec<usize>,
    pub clique_weight: Vec<f64>,
}

impl CausalRank {
    fn from_order(order: Vec<usize>, n_c: usize, occurrences: Vec<usize>, clique_weight: Vec<f64>) -> Self {
        let mut rho = vec![false; order.len()];
        for &i in order.iter().take(n_c) {
            rho[i] = true;
        }
        Self {
            order,
            rho,
            occurrences,
            clique_weight,
        }
    }

    pub fn controlled(&self) -> usize {
        self.rho.iter().filter(|&&r| r).count()
    }
}

/// Two distinct agents are adjacent when the mask links them both ways.
fn adjacent(mask: &BoolMatrix, a: usize, b: usize) -> bool {
    mask[a][b] && mask[b][a]
}

/// Greedy clique grown from `seed`, scanning candidates in ascending id.
/// Returns members and the accumulated weight `sum over joins of
/// sum_{v in clique} weights[joiner][v]`.
pub fn greedy_clique(g: &DecisionCausalGraph, seed: usize) -> (Vec<usize>, f64) {
    let n = g.num_agents();
    let mut members = vec![seed];
    let mut weight = 0.0;
    for cand in 0..n {
        if cand == seed {
            continue;
        }
        if members.iter().all(|&v| adjacent(&g.mask, cand, v)) {
            weight += members.iter().map(|&v| g.weights[cand][v]).sum::<f64>();
            members.push(cand);
        }
    }
    (members, weight)
}

/// Clique-occurrence ranking of agents.
///
/// One greedy clique is grown per seed agent. An agent's occurrence count is
/// the number of those cliques containing it and its clique weight is the
/// sum of their accumulated weights. Agents are ordered by occurrences
/// (descending), clique weight (descending), then id (ascending); the first
/// `n_c` get `rho = true`.
pub fn causal_rank(g: &DecisionCausalGraph, n_c: usize) -> Result<CausalRank, CausalError> {
    if n_c == 0 {
        return Err(CausalError::InvalidArgument("N_c must be at least 1".into()));
    }
    let n = g.num_agents();
    let mut occurrences = vec![0usize; n];
    let mut clique_weight = vec![0.0; n];
    for seed in 0..n {
        let (members, w) = greedy_clique(g, seed);
        for v in members {
            occurrences[v] += 1;
            clique_weight[v] += w;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        occurrences[b]
            .cmp(&occurrences[a])
            .then(clique_weight[b].total_cmp(&clique_weight[a]))
            .then(a.cmp(&b))
    });
    Ok(CausalRank::from_order(order, n_c, occurrences, clique_weight))
}

/// Number of distinct greedy cliques with at least two members; a scalar
/// summary of how interactive a scene is.
pub fn clique_score(g: &DecisionCausalGraph) -> usize {
    let mut cliques: Vec<Vec<usize>> = (0..g.num_agents())
        .map(|s| {
            let mut m = greedy_clique(g, s).0;
            m.sort_unstable();
            m
        })
        .filter(|m| m.len() >= 2)
        .collect();
    cliques.sort();
    cliques.dedup();
    cliques.len()
}

/// Agent-selection strategy used to pick the controllable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Clique-occurrence ranking over the decision causal graph.
    #[default]
    Causal,
    /// Closest-neighbor distance, ascending.
    Distance,
    /// Uniformly random order from the sampling seed.
    Random,
    /// Every agent is controllable.
    All,
}

impl std::str::FromStr for RankingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "causal" => Ok(Self::Causal),
            "distance" => Ok(Self::Distance),
            "random" => Ok(Self::Random),
            "all" => Ok(Self::All),
            other => Err(format!("unknown ranking '{other}' (causal|distance|random|all)")),
        }
    }
}

/// Rank agents under `mode`. `n_c = 0` yields no controllable agents.
pub fn rank_agents(
    mode: RankingMode,
    g: &DecisionCausalGraph,
    states: &[AgentState],
    n_c: usize,
    seed: u64,
) -> CausalRank {
    let n = g.num_agents();
    let zeros = || (vec![0usize; n], vec![0.0; n]);
    match mode {
        RankingMode::Causal if n_c > 0 => causal_rank(g, n_c).expect("n_c > 0"),
        RankingMode::Causal => {
            let mut r = causal_rank(g, 1).expect("n_c > 0");
            r.rho.iter_mut().for_each(|x| *x = false);
            r
        }
        RankingMode::Distance => {
            let nearest: Vec<f64> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| (states[j].x - states[i].x).hypot(states[j].y - states[i].y))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(a.cmp(&b)));
            let (occ, _) = zeros();
            CausalRank::from_order(order, n_c, occ, nearest.iter().map(|d| -d).collect())
        }
        RankingMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (occ, w) = zeros();
            CausalRank::from_order(order, n_c, occ, w)
        }
        RankingMode::All => {
            let (occ, w) = zeros();
            CausalRank::from_order((0..n).collect(), n, occ, w)
        }
    }
}

/// Gradient-conflict statistics between per-agent realism and reward gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    /// Fraction of considered agents whose gradients have negative inner product.
    pub fraction_conflicted: f64,
    /// Mean cosine similarity over the conflicted agents (0 if none).
    pub mean_neg_cosine: f64,
    pub considered: usize,
    pub conflicted: usize,
}

/// Rows whose realism gradient is zero are excluded from both statistics.
/// An agent with a zero reward row receives no steering and counts as
/// unconflicted.
pub fn conflict_diagnostics(
    realism_grads: &[Vec<f64>],
    reward_grads: &[Vec<f64>],
) -> Result<ConflictStats, CausalError> {
    if realism_grads.len() != reward_grads.len() {
        return Err(CausalError::Shape(format!(
            "{} realism rows vs {} reward rows",
            realism_grads.len(),
            reward_grads.len()
        )));
    }
    let mut considered = 0;
    let mut conflicted = 0;
    let mut cos_sum = 0.0;
    for (a, b) in realism_grads.iter().zip(reward_grads) {
        if a.len() != b.len() || a.is_empty() {
            return Err(CausalError::Shape("gradient rows must have equal, nonzero length".into()));
        }
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 {
            continue;
        }
        considered += 1;
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nb == 0.0 {
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        if dot < 0.0 {
            conflicted += 1;
            cos_sum += dot / (na * nb);
        }
    }
    Ok(ConflictStats {
        fraction_conflicted: if considered == 0 {
            0.0
        } else {
            conflicted as f64 / considered as f64
        },
        mean_neg_cosine: if conflicted == 0 {
            0.0
        } else {
            cos_sum / conflicted as f64
        },
        considered,
        conflicted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub r_squared: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation between a (standardized) clique score and a collision
/// indicator, with a two-sided p-value from Student's t with `n - 2` dof.
pub fn clique_collision_correlation(samples: &[(f64, f64)]) -> Result<Correlation, CausalError> {
    let n = samples.len();
    if n < 3 {
        return Err(CausalError::TooFewSamples { needed: 3, found: n });
    }
    let nf = n as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / nf;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / nf;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let syy: f64 = samples.iter().map(|s| (s.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(CausalError::DegenerateFeature);
    }
    if syy <= 0.0 {
        return Err(CausalError::DegenerateLabel);
    }
    // standardize: z-scores leave r unchanged but keep the computation well scaled
    let (sx, sy) = ((sxx / nf).sqrt(), (syy / nf).sqrt());
    let r = samples
        .iter()
        .map(|s| ((s.0 - mx) / sx) * ((s.1 - my) / sy))
        .sum::<f64>()
        / nf;
    let r = r.clamp(-1.0, 1.0);
    let dof = nf - 2.0;
    let p_value = if (1.0 - r * r) <= f64::EPSILON {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation {
        r,
        r_squared: r * r,
        p_value,
        n,
    })
}
