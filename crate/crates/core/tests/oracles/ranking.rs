use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenegen::causal::{causal_rank, DecisionCausalGraph};

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> DecisionCausalGraph {
    let density = rng.random_range(0.2..1.0);
    let mask = (0..n)
        .map(|i| (0..n).map(|j| i == j || rng.random_bool(density)).collect())
        .collect();
    // coarse weights make clique-weight ties common
    let coarse = rng.random_bool(0.5);
    let weights = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if coarse {
                        f64::from(rng.random_range(0..4u8)) * 0.25
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    DecisionCausalGraph { weights, mask }
}

struct Oracle {
    occurrences: Vec<usize>,
    weight: Vec<f64>,
}

fn oracle_scores(g: &DecisionCausalGraph) -> Oracle {
    let n = g.mask.len();
    let adj: Vec<u32> = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| b != a && g.mask[a][b] && g.mask[b][a])
                .fold(0u32, |m, b| m | (1 << b))
        })
        .collect();
    let mut occurrences = vec![0; n];
    let mut weight = vec![0.0; n];
    for seed in 0..n {
        let mut set = 1u32 << seed;
        let mut order = vec![seed];
        let mut w = 0.0;
        for c in (0..n).filter(|&c| c != seed) {
            if set & !(1 << c) & !adj[c] == 0 {
                for &v in &order {
                    w += g.weights[c][v];
                }
                set |= 1 << c;
                order.push(c);
            }
        }
        for v in (0..n).filter(|v| set & (1 << v) != 0) {
            occurrences[v] += 1;
            weight[v] += w;
        }
    }
    Oracle { occurrences, weight }
}

fn before(o: &Oracle, a: usize, b: usize) -> bool {
    if o.occurrences[a] != o.occurrences[b] {
        return o.occurrences[a] > o.occurrences[b];
    }
    if o.weight[a] != o.weight[b] {
        return o.weight[a] > o.weight[b];
    }
    a < b
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// The unique permutation in which every element precedes all later ones.
fn oracle_order(o: &Oracle, perms: &[Vec<usize>]) -> Vec<usize> {
    let valid: Vec<&Vec<usize>> = perms
        .iter()
        .filter(|p| (0..p.len()).all(|i| (i + 1..p.len()).all(|j| before(o, p[i], p[j]))))
        .collect();
    assert_eq!(valid.len(), 1, "tie rules must give a total order");
    valid[0].clone()
}

/// Compares `causal_rank` with the exhaustive oracle on `graphs` random
/// graphs of up to 6 agents; returns descriptions of the mismatches.
pub fn rank_mismatches(seed: u64, graphs: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    let mut bad = Vec::new();
    for case in 0..graphs {
        let n = rng.random_range(1..=6);
        let g = random_graph(&mut rng, n);
        let n_c = rng.random_range(1..=n);
        let rank = causal_rank(&g, n_c).unwrap();
        let o = oracle_scores(&g);
        let order = oracle_order(&o, &perms[n]);
        let rho: Vec<bool> = (0..n).map(|i| order[..n_c].contains(&i)).collect();
        if rank.order != order || rank.occurrences != o.occurrences || rank.rho != rho {
            bad.push(format!("graph {case}: got {:?}, oracle {:?}", rank.order, order));
        }
    }
    bad
}
