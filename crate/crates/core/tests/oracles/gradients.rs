use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenegen::causal::{full_mask, BoolMatrix};
use scenegen::datagen::{make_map, Layout};
use scenegen::denoiser::{
    denoise, denoiser_backprop, relative_features, Architecture, DenoiserInput, DenoiserParams, SceneFeatures, MAP_DIM,
};
use scenegen::dynamics::{rollout, DynamicsConfig};
use scenegen::guidance::{collision_cost, offroad_cost, overspeed_cost, weighted_objective, GuidanceContext};
use scenegen::scenario::{Action, AgentState, CostKind, GuidanceSpec, GuidanceTerm, MapModel};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Largest entrywise discrepancy relative to the larger gradient's max-norm.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

struct Instance {
    init: Vec<AgentState>,
    actions: Vec<Vec<Action>>,
}

fn instance(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Instance {
    // agents clustered so pair and map terms are all active
    let init = (0..n)
        .map(|_| {
            AgentState::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(3.0..9.0),
            )
        })
        .collect();
    let actions = (0..t)
        .map(|_| {
            (0..n)
                .map(|_| Action::new(rng.random_range(-3.0..3.0), rng.random_range(-0.6..0.6)))
                .collect()
        })
        .collect();
    Instance { init, actions }
}

fn fd_actions(actions: &[Vec<Action>], f: impl Fn(&[Vec<Action>]) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut a = actions.to_vec();
    for t in 0..actions.len() {
        for i in 0..actions[t].len() {
            for c in 0..2 {
                let orig = a[t][i];
                let bump = |a: &mut Vec<Vec<Action>>, d: f64| {
                    if c == 0 {
                        a[t][i].accel = orig.accel + d;
                    } else {
                        a[t][i].yaw_rate = orig.yaw_rate + d;
                    }
                };
                bump(&mut a, H);
                let fp = f(&a);
                bump(&mut a, -H);
                let fm = f(&a);
                a[t][i] = orig;
                out.push((fp - fm) / (2.0 * H));
            }
        }
    }
    out
}

fn flat(grad: &[Vec<[f64; 2]>]) -> Vec<f64> {
    grad.iter().flatten().flat_map(|g| [g[0], g[1]]).collect()
}

fn road() -> MapModel {
    make_map(Layout::Crossroads, 5.5, 60.0)
}

/// Worst relative error of the collision-cost gradient over `count` instances.
pub fn collision_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_cfg = DynamicsConfig::default();
    let spec = GuidanceSpec::default();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(2..5);
        let inst = instance(&mut rng, n, 12);
        let radii: Vec<f64> = inst.init.iter().map(AgentState::radius).collect();
        let f = |a: &[Vec<Action>]| {
            let tr = rollout(&inst.init, a, 0.1, &dyn_cfg).unwrap();
            collision_cost(&tr, &radii, &spec, &dyn_cfg).cost
        };
        let tr = rollout(&inst.init, &inst.actions, 0.1, &dyn_cfg).unwrap();
        let g = flat(&collision_cost(&tr, &radii, &spec, &dyn_cfg).grad);
        worst = worst.max(rel_error(&g, &fd_actions(&inst.actions, f)));
    }
    worst
}

pub fn offroad_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_cfg = DynamicsConfig::default();
    let spec = GuidanceSpec::default();
    let map = road();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..4);
        let inst = instance(&mut rng, n, 12);
        let f = |a: &[Vec<Action>]| {
            let tr = rollout(&inst.init, a, 0.1, &dyn_cfg).unwrap();
            offroad_cost(&tr, &map, &spec, &dyn_cfg).cost
        };
        let tr = rollout(&inst.init, &inst.actions, 0.1, &dyn_cfg).unwrap();
        let g = flat(&offroad_cost(&tr, &map, &spec, &dyn_cfg).grad);
        worst = worst.max(rel_error(&g, &fd_actions(&inst.actions, f)));
    }
    worst
}

pub fn overspeed_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_cfg = DynamicsConfig::default();
    let spec = GuidanceSpec::default();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..4);
        let inst = instance(&mut rng, n, 12);
        let f = |a: &[Vec<Action>]| {
            let tr = rollout(&inst.init, a, 0.1, &dyn_cfg).unwrap();
            overspeed_cost(&tr, 7.0, &spec, &dyn_cfg).cost
        };
        let tr = rollout(&inst.init, &inst.actions, 0.1, &dyn_cfg).unwrap();
        let g = flat(&overspeed_cost(&tr, 7.0, &spec, &dyn_cfg).grad);
        worst = worst.max(rel_error(&g, &fd_actions(&inst.actions, f)));
    }
    worst
}

/// Scoped weighted objective against per-term scoped differences.
pub fn weighted_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_cfg = DynamicsConfig::default();
    let map = road();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(2..5);
        let inst = instance(&mut rng, n, 10);
        let spec = GuidanceSpec {
            terms: vec![
                GuidanceTerm {
                    cost: CostKind::Collision,
                    weight: -50.0,
                    scope: None,
                },
                GuidanceTerm {
                    cost: CostKind::Offroad,
                    weight: 1.0,
                    scope: Some(vec![0]),
                },
                GuidanceTerm {
                    cost: CostKind::Overspeed,
                    weight: 0.5,
                    scope: Some(vec![1]),
                },
            ],
            ..GuidanceSpec::default()
        };
        let ctx = GuidanceContext::new(inst.init.clone(), &map, 0.1, dyn_cfg);
        // scopes zero out-of-scope gradient rows, so compare against a
        // per-term scoped numeric derivative
        let g = flat(&weighted_objective(&ctx, &spec, &inst.actions).unwrap().grad);
        let mut num = vec![0.0; g.len()];
        for term in &spec.terms {
            let single = GuidanceSpec {
                terms: vec![GuidanceTerm { scope: None, ..term.clone() }],
                ..spec.clone()
            };
            let d = fd_actions(&inst.actions, |a| weighted_objective(&ctx, &single, a).unwrap().cost);
            for (k, v) in d.iter().enumerate() {
                let agent = (k / 2) % n;
                if term.in_scope(agent) {
                    num[k] += v;
                }
            }
        }
        worst = worst.max(rel_error(&g, &num));
    }
    worst
}

fn tiny_arch() -> Architecture {
    Architecture {
        history_len: 3,
        horizon: 3,
        d_model: 6,
        history_hidden: 5,
        rel_hidden: 3,
        heads: 2,
        layers: 2,
        head_hidden: 7,
    }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, arch: &Architecture) -> (SceneFeatures, Vec<Vec<f64>>, BoolMatrix) {
    let states: Vec<AgentState> = (0..n)
        .map(|_| {
            AgentState::new(
                rng.random_range(-15.0..15.0),
                rng.random_range(-15.0..15.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..8.0),
            )
        })
        .collect();
    let f = SceneFeatures {
        history: (0..n)
            .map(|_| (0..4 * arch.history_len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        relative: (0..n).map(|i| (0..n).map(|j| relative_features(&states, i, j)).collect()).collect(),
        map: (0..n).map(|_| (0..MAP_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    };
    let x = (0..n)
        .map(|_| (0..2 * arch.horizon).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mask = if rng.random_bool(0.3) {
        full_mask(n)
    } else {
        (0..n)
            .map(|i| (0..n).map(|j| i == j || rng.random_bool(0.5)).collect())
            .collect()
    };
    (f, x, mask)
}

/// Parameter gradients of a random linear functional of the denoiser output.
pub fn denoiser_worst(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = tiny_arch();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..5);
        let mut p = DenoiserParams::init(arch, &mut rng).unwrap();
        // nonzero biases so every parameter has a visible effect
        for v in p.data.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let (f, x, mask) = random_input(&mut rng, n, &arch);
        let k = rng.random_range(1..100);
        let ab = rng.random_range(0.05..0.95);
        let dy: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2 * arch.horizon).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let input = DenoiserInput {
            noisy: &x,
            features: &f,
            k,
            alpha_bar: ab,
            mask: &mask,
        };
        let g = denoiser_backprop(&input, &p, &dy).unwrap().params;
        let objective = |p: &DenoiserParams| -> f64 {
            let out = denoise(&input, p).unwrap();
            out.actions.iter().flatten().zip(dy.iter().flatten()).map(|(a, b)| a * b).sum()
        };
        let mut num = Vec::with_capacity(p.data.len());
        let mut q = p.clone();
        for idx in 0..p.data.len() {
            let orig = q.data[idx];
            q.data[idx] = orig + H;
            let fp = objective(&q);
            q.data[idx] = orig - H;
            let fm = objective(&q);
            q.data[idx] = orig;
            num.push((fp - fm) / (2.0 * H));
        }
        worst = worst.max(rel_error(&g, &num));
    }
    worst
}
