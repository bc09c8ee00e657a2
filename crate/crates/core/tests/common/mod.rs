//! Independent oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use rand::Rng;

/// Minimum transport cost by enumerating every vertex of the transportation
/// polytope. A vertex is a basic solution whose basis is a spanning tree of
/// the complete bipartite graph, so each tree is tried and its unique flow
/// kept when nonnegative.
pub fn enumeration_ot(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (n1, n2) = (a.len(), b.len());
    assert_eq!(cost.len(), n1 * n2);
    let edges: Vec<(usize, usize)> = (0..n1).flat_map(|i| (0..n2).map(move |j| (i, j))).collect();
    let size = n1 + n2 - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(size);
    choose(&edges, 0, size, &mut chosen, &mut |tree| {
        if let Some(flow) = tree_flow(a, b, tree) {
            let c: f64 = tree.iter().zip(&flow).map(|(&(i, j), f)| f * cost[i * n2 + j]).sum();
            best = best.min(c);
        }
    });
    best
}

fn choose(edges: &[(usize, usize)], from: usize, left: usize, chosen: &mut Vec<(usize, usize)>, visit: &mut impl FnMut(&[(usize, usize)])) {
    if left == 0 {
        visit(chosen);
        return;
    }
    for k in from..=edges.len() - left {
        chosen.push(edges[k]);
        choose(edges, k + 1, left - 1, chosen, visit);
        chosen.pop();
    }
}

/// Flow on a spanning tree meeting the marginals, or `None` when the edge
/// set has a cycle or the flow is negative somewhere.
fn tree_flow(a: &[f64], b: &[f64], tree: &[(usize, usize)]) -> Option<Vec<f64>> {
    let n1 = a.len();
    let nodes = n1 + b.len();
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in tree {
        let (u, v) = (find(&mut parent, i), find(&mut parent, n1 + j));
        if u == v {
            return None;
        }
        parent[u] = v;
    }
    // Supplies are positive on sources, negative on sinks; peel leaves.
    let mut excess: Vec<f64> = a.iter().copied().chain(b.iter().map(|x| -x)).collect();
    let mut degree = vec![0usize; nodes];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[n1 + j] += 1;
    }
    let mut flow = vec![f64::NAN; tree.len()];
    let mut done = vec![false; tree.len()];
    for _ in 0..tree.len() {
        let (e, leaf) = (0..tree.len())
            .filter(|&e| !done[e])
            .find_map(|e| {
                let (i, j) = tree[e];
                if degree[i] == 1 {
                    Some((e, i))
                } else if degree[n1 + j] == 1 {
                    Some((e, n1 + j))
                } else {
                    None
                }
            })
            .expect("a forest always has a leaf");
        let (i, j) = tree[e];
        let other = if leaf == i { n1 + j } else { i };
        // Flow runs source → sink, so a source leaf ships its excess and a
        // sink leaf receives its deficit.
        let f = if leaf < n1 { excess[leaf] } else { -excess[leaf] };
        if f < -1e-13 {
            return None;
        }
        flow[e] = f.max(0.0);
        if leaf < n1 {
            excess[other] += f;
        } else {
            excess[other] -= f;
        }
        excess[leaf] = 0.0;
        degree[leaf] -= 1;
        degree[other] -= 1;
        done[e] = true;
    }
    Some(flow)
}

/// Random instance with at most `max_support` support points in total.
pub fn random_instance(rng: &mut impl Rng, max_support: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n1 = rng.random_range(1..max_support);
    let n2 = rng.random_range(1..=max_support - n1);
    let weights = |rng: &mut dyn rand::RngCore, n: usize| {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let a = weights(rng, n1);
    let b = weights(rng, n2);
    let cost = (0..n1 * n2).map(|_| rng.random_range(0.0..4.0)).collect();
    (a, b, cost)
}
