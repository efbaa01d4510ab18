//! Shared oracles for the integration tests. Everything here is independent
//! of the library's transport solver: the 1-D distance is the closed-form
//! sorted-merge CDF integral, and the small-instance optimum is found by
//! exhaustively enumerating spanning trees of the transportation polytope.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use ses_core::emd::SamplingGraph;

/// Closed-form 1-D Wasserstein-1 between weighted point sets on a line:
/// the integral of |CDF_a - CDF_b| over the merged support.
pub fn wasserstein_1d(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut ts: Vec<f64> = a.iter().chain(b.iter()).map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let cdf = |pts: &[(f64, f64)], t: f64| -> f64 {
        pts.iter().filter(|p| p.0 <= t).map(|p| p.1).sum()
    };
    let mut total = 0.0;
    for win in ts.windows(2) {
        total += (cdf(a, win[0]) - cdf(b, win[0])).abs() * (win[1] - win[0]);
    }
    total
}

/// Exhaustive minimum over all vertices of the balanced transportation
/// polytope: enumerates every spanning tree of the complete bipartite
/// row/col graph, solves the unique flows by leaf elimination, and keeps the
/// cheapest feasible (non-negative) solution.
pub fn polytope_min_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let (m, n) = (supply.len(), demand.len());
    let nodes = m + n;
    let need = nodes - 1;
    let edges: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .collect();

    // Union-find with explicit undo so the recursion can backtrack.
    struct Dsu {
        parent: Vec<usize>,
        size: Vec<usize>,
        trail: Vec<(usize, usize)>,
    }
    impl Dsu {
        fn find(&self, mut x: usize) -> usize {
            while self.parent[x] != x {
                x = self.parent[x];
            }
            x
        }
        fn union(&mut self, a: usize, b: usize) -> bool {
            let (ra, rb) = (self.find(a), self.find(b));
            if ra == rb {
                return false;
            }
            let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
            self.parent[small] = big;
            self.size[big] += self.size[small];
            self.trail.push((small, big));
            true
        }
        fn undo(&mut self) {
            let (small, big) = self.trail.pop().expect("undo without union");
            self.parent[small] = small;
            self.size[big] -= self.size[small];
        }
    }

    fn tree_cost(
        chosen: &[usize],
        edges: &[(usize, usize)],
        supply: &[f64],
        demand: &[f64],
        cost: &[f64],
        m: usize,
        n: usize,
    ) -> Option<f64> {
        // Leaf elimination determines every flow uniquely on a tree.
        let nodes = m + n;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes]; // (edge idx into chosen, other node)
        for (ci, &ei) in chosen.iter().enumerate() {
            let (i, j) = edges[ei];
            adj[i].push((ci, m + j));
            adj[m + j].push((ci, i));
        }
        let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
        let mut balance: Vec<f64> = supply
            .iter()
            .copied()
            .chain(demand.iter().copied())
            .collect();
        let mut used = vec![false; chosen.len()];
        let mut flows = vec![0.0; chosen.len()];
        let mut stack: Vec<usize> = (0..nodes).filter(|&v| degree[v] == 1).collect();
        let mut processed = 0;
        while let Some(v) = stack.pop() {
            if degree[v] != 1 {
                continue;
            }
            let &(ci, other) = adj[v]
                .iter()
                .find(|&&(ci, _)| !used[ci])
                .expect("leaf has one unused edge");
            // Shipped amount equals the leaf's outstanding balance whether
            // the leaf is a supply row or a demand column.
            let f = balance[v];
            flows[ci] = f;
            used[ci] = true;
            balance[v] = 0.0;
            balance[other] -= f;
            degree[v] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                stack.push(other);
            }
            processed += 1;
            if processed == chosen.len() {
                break;
            }
        }
        if flows.iter().any(|&f| f < -1e-12) {
            return None;
        }
        let total = chosen
            .iter()
            .zip(&flows)
            .map(|(&ei, &f)| {
                let (i, j) = edges[ei];
                f.max(0.0) * cost[i * n + j]
            })
            .sum();
        Some(total)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        start: usize,
        chosen: &mut Vec<usize>,
        dsu: &mut Dsu,
        best: &mut f64,
        edges: &[(usize, usize)],
        supply: &[f64],
        demand: &[f64],
        cost: &[f64],
        m: usize,
        n: usize,
        need: usize,
    ) {
        if chosen.len() == need {
            if let Some(c) = tree_cost(chosen, edges, supply, demand, cost, m, n) {
                if c < *best {
                    *best = c;
                }
            }
            return;
        }
        let remaining_needed = need - chosen.len();
        for ei in start..edges.len() {
            if edges.len() - ei < remaining_needed {
                break;
            }
            let (i, j) = edges[ei];
            if dsu.union(i, m + j) {
                chosen.push(ei);
                recurse(ei + 1, chosen, dsu, best, edges, supply, demand, cost, m, n, need);
                chosen.pop();
                dsu.undo();
            }
        }
    }

    let mut dsu = Dsu {
        parent: (0..nodes).collect(),
        size: vec![1; nodes],
        trail: Vec::new(),
    };
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(need);
    recurse(
        0, &mut chosen, &mut dsu, &mut best, &edges, supply, demand, cost, m, n, need,
    );
    best
}

pub fn normalized_weights(rng: &mut ChaCha12Rng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

pub fn random_graph(rng: &mut ChaCha12Rng, max_pts: usize, span: f64) -> SamplingGraph {
    let k = rng.random_range(1..=max_pts);
    let points: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.random_range(-span..span), rng.random_range(-span..span)))
        .collect();
    SamplingGraph::new(points, normalized_weights(rng, k)).expect("random graph")
}

pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
