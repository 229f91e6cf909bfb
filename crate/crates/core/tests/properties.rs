use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenegen::causal::{build_dcg, compute_ttc, edge_count, ttc_mask_states, BoolMatrix};
use scenegen::closedloop::{run_closed_loop, LoopConfig, ScenarioSampler};
use scenegen::datagen::{make_map, make_scene, Layout, SceneGenConfig};
use scenegen::denoiser::{denoise, Architecture, DenoiserInput, DenoiserParams, SceneFeatures, MAP_DIM};
use scenegen::diffusion::{cfg_combine, SampleError};
use scenegen::dynamics::{rollout, DynamicsConfig};
use scenegen::guidance::{weighted_objective, GuidanceContext};
use scenegen::scenario::{normalize_angle, Action, AgentState, CostKind, GuidanceSpec, GuidanceTerm, Scene, Trajectory};
use std::f64::consts::PI;

fn state() -> impl Strategy<Value = AgentState> {
    (-40.0..40.0f64, -40.0..40.0f64, -PI..PI, 0.0..15.0f64).prop_map(|(x, y, h, v)| AgentState::new(x, y, h, v))
}

fn action() -> impl Strategy<Value = Action> {
    (-8.0..8.0f64, -1.5..1.5f64).prop_map(|(a, r)| Action::new(a, r))
}

fn plan(n: usize, t: usize) -> impl Strategy<Value = Vec<Vec<Action>>> {
    prop::collection::vec(prop::collection::vec(action(), n), t)
}

fn mask(n: usize) -> impl Strategy<Value = BoolMatrix> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), n), n).prop_map(|mut m| {
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = true;
        }
        m
    })
}

fn scene(seed: u64, n: usize) -> Scene {
    let layouts = [Layout::Straight, Layout::TJunction, Layout::Crossroads];
    let map = make_map(layouts[seed as usize % 3], 5.5, 160.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_scene(&map, n, &mut rng, &SceneGenConfig::default()).unwrap().scene
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scene_json_round_trips(seed in 0u64..1000, n in 0usize..5) {
        let s = scene(seed, n);
        let back: Scene = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn trajectory_json_round_trips(init in prop::collection::vec(state(), 3), a in plan(3, 8)) {
        let tr = rollout(&init, &a, 0.1, &DynamicsConfig::default()).unwrap();
        let back: Trajectory = serde_json::from_str(&serde_json::to_string(&tr).unwrap()).unwrap();
        prop_assert_eq!(back, tr);
    }
}

proptest! {
    #[test]
    fn rollout_keeps_state_invariants(
        (init, a) in (1usize..4, 1usize..30).prop_flat_map(|(n, t)| (prop::collection::vec(state(), n), plan(n, t)))
    ) {
        let t = a.len();
        let cfg = DynamicsConfig::default();
        let tr = rollout(&init, &a, 0.1, &cfg).unwrap();
        prop_assert_eq!(tr.states.len(), t + 1);
        for s in tr.states.iter().flatten() {
            prop_assert!(s.speed >= 0.0);
            prop_assert!(s.heading > -PI && s.heading <= PI);
            prop_assert_eq!(normalize_angle(s.heading), s.heading);
        }
        for ap in tr.actions.iter().flatten() {
            prop_assert!(ap.accel.abs() <= cfg.a_max && ap.yaw_rate.abs() <= cfg.r_max);
        }
        // prefix consistency
        let cut = t / 2;
        let pre = rollout(&init, &a[..cut], 0.1, &cfg).unwrap();
        prop_assert_eq!(&pre.states[..], &tr.states[..=cut]);
    }

    #[test]
    fn dcg_rows_are_distributions(
        (m, logits) in (1usize..7).prop_flat_map(|n| (mask(n), prop::collection::vec(prop::collection::vec(-30.0..30.0f64, n), n)))
    ) {
        let n = m.len();
        let g = build_dcg(&m, &logits).unwrap();
        for i in 0..n {
            let sum: f64 = g.weights[i].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!(g.weights[i][j] >= 0.0);
                if !m[i][j] {
                    prop_assert_eq!(g.weights[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn ttc_is_symmetric(a in state(), b in state()) {
        let (ab, ba) = (compute_ttc(&a, &b), compute_ttc(&b, &a));
        prop_assert!(ab == ba || (ab - ba).abs() <= 1e-9 * ab.abs().max(1.0), "{} vs {}", ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn ttc_mask_sparsity_monotone(states in prop::collection::vec(state(), 1..8)) {
        let counts: Vec<usize> = [5.0, 4.0, 3.0, 2.0, 1.0]
            .iter()
            .map(|&c| edge_count(&ttc_mask_states(&states, c, 50.0)))
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{:?}", counts);
        let m = ttc_mask_states(&states, 3.0, 50.0);
        for i in 0..states.len() {
            prop_assert!(m[i][i]);
            for j in 0..states.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn cfg_combine_is_linear(
        c1 in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 3),
        c2 in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 3),
        u1 in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 3),
        u2 in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 3),
        w in 1.0..2.0f64,
        rho in prop::collection::vec(any::<bool>(), 3),
    ) {
        let add = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        };
        let lhs = cfg_combine(&add(&c1, &c2), &add(&u1, &u2), w, &rho);
        let rhs = add(&cfg_combine(&c1, &u1, w, &rho), &cfg_combine(&c2, &u2, w, &rho));
        for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
            for (a, b) in l.iter().zip(r) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if !rho[i] {
                prop_assert_eq!(l, &add(&c1, &c2)[i]);
            }
        }
        prop_assert_eq!(cfg_combine(&c1, &u1, 1.0, &[true; 3]), c1);
    }
}

fn all_costs() -> GuidanceSpec {
    GuidanceSpec {
        terms: vec![
            GuidanceTerm { cost: CostKind::Collision, weight: -50.0, scope: None },
            GuidanceTerm { cost: CostKind::Offroad, weight: 1.0, scope: None },
            GuidanceTerm { cost: CostKind::Overspeed, weight: 0.5, scope: None },
        ],
        ..GuidanceSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn costs_invariant_under_translation(
        (init, a) in (2usize..4).prop_flat_map(|n| (prop::collection::vec(state(), n), plan(n, 10))),
        dx in -100i32..100,
        dy in -100i32..100,
    ) {
        let map = make_map(Layout::Crossroads, 5.5, 120.0);
        let (dx, dy) = (f64::from(dx) * 0.5, f64::from(dy) * 0.5);
        let mut moved_map = map.clone();
        moved_map.drivable.origin[0] += dx;
        moved_map.drivable.origin[1] += dy;
        let moved: Vec<AgentState> = init.iter().map(|s| AgentState { x: s.x + dx, y: s.y + dy, ..*s }).collect();
        let cfg = DynamicsConfig::default();
        let spec = all_costs();
        let base = weighted_objective(&GuidanceContext::new(init, &map, 0.1, cfg), &spec, &a).unwrap();
        let shifted = weighted_objective(&GuidanceContext::new(moved, &moved_map, 0.1, cfg), &spec, &a).unwrap();
        let tol = 1e-7 * base.cost.abs().max(1.0);
        prop_assert!((base.cost - shifted.cost).abs() < tol, "{} vs {}", base.cost, shifted.cost);
        for (g, h) in base.grad.iter().flatten().zip(shifted.grad.iter().flatten()) {
            prop_assert!((g[0] - h[0]).abs() < 1e-6 * g[0].abs().max(1.0));
            prop_assert!((g[1] - h[1]).abs() < 1e-6 * g[1].abs().max(1.0));
        }
    }
}

fn tiny_arch() -> Architecture {
    Architecture {
        history_len: 4,
        horizon: 5,
        d_model: 8,
        history_hidden: 8,
        rel_hidden: 4,
        heads: 2,
        layers: 2,
        head_hidden: 8,
    }
}

#[derive(Debug, Clone)]
struct DenoiserCase {
    features: SceneFeatures,
    noisy: Vec<Vec<f64>>,
    mask: BoolMatrix,
}

fn denoiser_case(n: usize) -> impl Strategy<Value = DenoiserCase> {
    let arch = tiny_arch();
    let row = |len: usize| prop::collection::vec(-1.0..1.0f64, len);
    (
        prop::collection::vec(row(4 * arch.history_len), n),
        prop::collection::vec(prop::collection::vec(prop::array::uniform6(-1.0..1.0f64), n), n),
        prop::collection::vec(row(MAP_DIM), n),
        prop::collection::vec(row(2 * arch.horizon), n),
        mask(n),
    )
        .prop_map(|(history, relative, map, noisy, mask)| DenoiserCase {
            features: SceneFeatures { history, relative, map },
            noisy,
            mask,
        })
}

fn run_denoiser(p: &DenoiserParams, c: &DenoiserCase) -> Vec<Vec<f64>> {
    let input = DenoiserInput {
        noisy: &c.noisy,
        features: &c.features,
        k: 17,
        alpha_bar: 0.6,
        mask: &c.mask,
    };
    denoise(&input, p).unwrap().actions
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn denoiser_is_permutation_equivariant(c in denoiser_case(4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(), seed in any::<u64>()) {
        let p = DenoiserParams::init(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let n = 4;
        // new position q holds old agent perm[q]
        let pc = DenoiserCase {
            features: SceneFeatures {
                history: perm.iter().map(|&i| c.features.history[i].clone()).collect(),
                relative: perm.iter().map(|&i| perm.iter().map(|&j| c.features.relative[i][j]).collect()).collect(),
                map: perm.iter().map(|&i| c.features.map[i].clone()).collect(),
            },
            noisy: perm.iter().map(|&i| c.noisy[i].clone()).collect(),
            mask: (0..n).map(|a| (0..n).map(|b| c.mask[perm[a]][perm[b]]).collect()).collect(),
        };
        let out = run_denoiser(&p, &c);
        let pout = run_denoiser(&p, &pc);
        for q in 0..n {
            for (a, b) in pout[q].iter().zip(&out[perm[q]]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn denoiser_ignores_masked_agents(c in denoiser_case(4), other in denoiser_case(4), seed in any::<u64>()) {
        let p = DenoiserParams::init(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = run_denoiser(&p, &c);
        let i = 0;
        // replace every input of agents that agent 0 does not attend to
        let hidden: Vec<usize> = (1..4).filter(|&j| !c.mask[i][j]).collect();
        let mut d = c.clone();
        for &j in &hidden {
            d.features.history[j] = other.features.history[j].clone();
            d.features.map[j] = other.features.map[j].clone();
            d.noisy[j] = other.noisy[j].clone();
            for a in 0..4 {
                d.features.relative[j][a] = other.features.relative[j][a];
                d.features.relative[a][j] = other.features.relative[a][j];
            }
        }
        prop_assert_eq!(&run_denoiser(&p, &d)[i], &out[i]);
    }
}

/// Fixed-horizon sampler that proposes constant per-agent actions keyed by the seed.
struct ConstSampler {
    horizon: usize,
}

impl ScenarioSampler for ConstSampler {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn sample(&self, scene: &Scene, seed: u64) -> Result<Trajectory, SampleError> {
        let n = scene.num_agents();
        let a: Vec<Action> = (0..n)
            .map(|i| {
                let u = ((seed.wrapping_mul(31).wrapping_add(i as u64)) % 7) as f64;
                Action::new(u * 0.2 - 0.6, u * 0.02 - 0.06)
            })
            .collect();
        rollout(&scene.current_states(), &vec![a; self.horizon], scene.dt, &DynamicsConfig::default())
            .map_err(|source| SampleError::Dynamics { k: 0, source })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_loop_commit_bookkeeping(
        seed in 0u64..500,
        n in 1usize..4,
        replan in 1usize..20,
        total in 1usize..60,
    ) {
        let s = scene(seed, n);
        let sampler = ConstSampler { horizon: 20 };
        let cfg = LoopConfig { replan_steps: replan, horizon_steps: total, ..LoopConfig::default() };
        let run = run_closed_loop(&s, &sampler, &cfg, seed, None).unwrap();
        let tr = &run.trajectory;
        prop_assert_eq!(tr.actions.len(), total);
        prop_assert_eq!(tr.states.len(), total + 1);
        prop_assert_eq!(run.commits.len(), total.div_ceil(replan));
        prop_assert_eq!(run.histories.len(), run.commits.len());
        // the whole run is a single feasible rollout from the initial state
        let again = rollout(&s.current_states(), &tr.actions, s.dt, &cfg.dynamics).unwrap();
        prop_assert_eq!(&again.states, &tr.states);
        let mut t = 0;
        for (c, h) in run.commits.iter().zip(&run.histories) {
            prop_assert_eq!(h.current_states(), tr.states[t].clone());
            prop_assert_eq!(h.history_len(), s.history_len());
            prop_assert_eq!(&c.actions[..], &tr.actions[t..t + c.horizon()]);
            t += c.horizon();
        }
        prop_assert_eq!(t, total);
    }
}
