use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scenegen::datagen::{make_map, make_scene, Layout, SceneGenConfig};
use scenegen::denoiser::{AnalyticDenoiser, Denoiser};
use scenegen::diffusion::{forward_noise, guided_sample, guided_sample_with_report, NoiseSchedule, SamplerConfig};
use scenegen::scenario::{GuidanceSpec, Scene};

pub fn crossroads_scene(seed: u64, n: usize) -> Scene {
    let map = make_map(Layout::Crossroads, 5.5, 160.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_scene(&map, n, &mut rng, &SceneGenConfig::default()).unwrap().scene
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ComponentStats {
    pub t: usize,
    pub component: usize,
    pub mean: f64,
    pub target: f64,
    pub se: f64,
    pub std: f64,
}

impl ComponentStats {
    pub fn z(&self) -> f64 {
        (self.mean - self.target).abs() / self.se
    }
}

/// Unguided sampling with the conjugate-Gaussian oracle on a one-agent scene;
/// sample mean, standard error and spread of every action coordinate.
pub fn analytic_oracle_stats(runs: u64) -> (AnalyticDenoiser, Vec<ComponentStats>) {
    let oracle = AnalyticDenoiser {
        horizon: 3,
        mean: [0.8, 0.15],
        std: [0.1, 0.1],
    };
    let sched = NoiseSchedule::cosine(100);
    let s = crossroads_scene(1, 1);
    let samples: Vec<Vec<[f64; 2]>> = (0..runs)
        .map(|seed| {
            let tr = guided_sample(&s, &oracle, &sched, &SamplerConfig::unguided(seed)).unwrap();
            tr.actions.iter().map(|row| [row[0].accel, row[0].yaw_rate]).collect()
        })
        .collect();
    let m = runs as f64;
    let mut out = Vec::new();
    for t in 0..oracle.horizon {
        for c in 0..2 {
            let v: Vec<f64> = samples.iter().map(|s| s[t][c]).collect();
            let mean = v.iter().sum::<f64>() / m;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            out.push(ComponentStats {
                t,
                component: c,
                mean,
                target: oracle.mean[c],
                se: (var / m).sqrt(),
                std: var.sqrt(),
            });
        }
    }
    (oracle, out)
}

/// Per-component (mean, variance) of `forward_noise` at `k = K` from a fixed point.
pub fn forward_moments(samples: usize) -> Vec<(f64, f64)> {
    let sched = NoiseSchedule::cosine(100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = vec![vec![1.5, -2.0]; samples];
    let noise = gaussian(&mut rng, samples, 2);
    let out = forward_noise(&x, sched.steps(), &sched, &noise);
    (0..2)
        .map(|c| {
            let mean = out.iter().map(|r| r[c]).sum::<f64>() / samples as f64;
            let var = out.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / samples as f64;
            (mean, var)
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct NoopReport {
    /// Uncontrolled agents compared.
    pub checked: usize,
    /// Controlled agents whose actions guidance changed.
    pub moved: usize,
    pub violations: Vec<String>,
}

/// Samples each scene with and without cost guidance under the same seed;
/// agents never ranked controllable must come back bit-identical.
pub fn masking_noop(den: &dyn Denoiser, sched: &NoiseSchedule, scenes: &[Scene], base: &SamplerConfig) -> NoopReport {
    let mut r = NoopReport::default();
    for (i, s) in scenes.iter().enumerate() {
        let guided = SamplerConfig {
            seed: base.seed.wrapping_add(i as u64),
            freeze_graph: base.freeze_graph || i % 2 == 0,
            ..base.clone()
        };
        let plain = SamplerConfig {
            guidance: GuidanceSpec::empty(),
            ..guided.clone()
        };
        let (g, report) = guided_sample_with_report(s, den, sched, &guided).unwrap();
        let p = guided_sample(s, den, sched, &plain).unwrap();
        for a in 0..s.num_agents() {
            let same = g.actions.iter().zip(&p.actions).all(|(x, y)| x[a] == y[a]);
            if report.controlled[a] {
                r.moved += usize::from(!same);
            } else {
                r.checked += 1;
                if !same {
                    r.violations.push(format!("scene {i} agent {a}"));
                }
            }
        }
    }
    r
}
