//! Optimal transport between finite measures: an exact network simplex,
//! entropic (Sinkhorn) plans, and the bounds used by the cone experiments.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::ConeSpace;
use crate::mmspace::{MetricMeasure, ProbMeasure};
use crate::numeric::pairwise_sum;

/// Tolerance on marginal agreement of a coupling.
pub const MARGINAL_TOL: f64 = 1e-9;

/// Support size up to which the exact solver is the default.
pub const EXACT_SUPPORT_LIMIT: usize = 3000;

/// Dense row-major cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        if let Some(k) = data.iter().position(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("cost", format!("entry {k} = {} is not finite and nonnegative", data[k])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Result<Self> {
        let mut data = vec![0.0; rows * cols];
        data.par_chunks_mut(cols.max(1)).enumerate().for_each(|(i, row)| {
            for (j, c) in row.iter_mut().enumerate() {
                *c = f(i, j);
            }
        });
        Self::new(rows, cols, data)
    }

    /// `d(i, j)^p` over all points of a space.
    pub fn from_space<S: MetricMeasure + ?Sized>(space: &S, p: u32) -> Result<Self> {
        let n = space.len();
        Self::from_fn(n, n, |i, j| space.dist(i, j).powi(p as i32))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// A transport plan stored sparsely, in original point indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coupling {
    /// `(source index, target index, weight)` with positive weights.
    pub entries: Vec<(usize, usize, f64)>,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl Coupling {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.source.len()];
        for &(i, _, w) in &self.entries {
            r[i] += w;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.target.len()];
        for &(_, j, w) in &self.entries {
            c[j] += w;
        }
        c
    }

    /// Largest absolute marginal deviation.
    pub fn marginal_error(&self) -> f64 {
        let r = self.row_sums().iter().zip(&self.source).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let c = self.col_sums().iter().zip(&self.target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        r.max(c)
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        let terms: Vec<f64> = self.entries.iter().map(|&(i, j, w)| w * cost.get(i, j)).collect();
        pairwise_sum(&terms)
    }

    pub fn dense(&self) -> Vec<f64> {
        let m = self.target.len();
        let mut d = vec![0.0; self.source.len() * m];
        for &(i, j, w) in &self.entries {
            d[i * m + j] += w;
        }
        d
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// `|primal − dual|` for the exact solver.
    pub duality_gap: f64,
    /// L¹ marginal violation of the unrounded plan (Sinkhorn).
    pub marginal_violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OTResult {
    /// Optimal `W_p^p` (exact), or the rounded plan's cost (Sinkhorn).
    pub cost: f64,
    /// `cost^{1/p}`.
    pub value: f64,
    /// Cost of the raw, unrounded entropic plan.
    pub raw_cost: Option<f64>,
    pub coupling: Coupling,
    pub diagnostics: SolverDiagnostics,
}

fn check_marginals(mu: &[f64], nu: &[f64], cost: &CostMatrix) -> Result<()> {
    if mu.len() != cost.rows || nu.len() != cost.cols {
        return Err(Error::DimensionMismatch { expected: cost.rows * cost.cols, got: mu.len() * nu.len() });
    }
    let (a, b) = (pairwise_sum(mu), pairwise_sum(nu));
    if (a - b).abs() > 1e-10 {
        return Err(Error::InvalidMeasure(format!("marginal masses differ: {a} vs {b}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Network simplex

const NONE: usize = usize::MAX;

/// Transportation network simplex over the complete bipartite graph.
///
/// Nodes are `n1` sources, `n2` sinks and an artificial root joined to every
/// node by a big-cost arc. Every source's tree arc points towards its
/// parent and every sink's away from it, so arc directions are implicit.
struct NetworkSimplex<'a> {
    n1: usize,
    n2: usize,
    cost: &'a [f64],
    art_cost: f64,
    parent: Vec<usize>,
    flow: Vec<f64>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    children: Vec<Vec<usize>>,
    child_pos: Vec<usize>,
    next_arc: usize,
    block: usize,
    eps: f64,
    stack: Vec<usize>,
}

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Self {
        let (n1, n2) = (supply.len(), demand.len());
        let root = n1 + n2;
        let max_cost = cost.iter().copied().fold(0.0, f64::max);
        let art_cost = (max_cost + 1.0) * (n1 + n2) as f64;
        let mut s = Self {
            n1,
            n2,
            cost,
            art_cost,
            parent: vec![root; root + 1],
            flow: vec![0.0; root + 1],
            depth: vec![1; root + 1],
            pi: vec![0.0; root + 1],
            children: vec![Vec::new(); root + 1],
            child_pos: vec![0; root + 1],
            next_arc: 0,
            block: (((n1 * n2) as f64).sqrt() as usize).max(10),
            // potentials carry offsets of size art_cost; stay above their rounding
            eps: (1e-12 * max_cost).max(8.0 * f64::EPSILON * art_cost),
            stack: Vec::new(),
        };
        s.parent[root] = NONE;
        s.depth[root] = 0;
        for (i, &m) in supply.iter().enumerate() {
            s.flow[i] = m;
            s.pi[i] = -art_cost;
            s.add_child(root, i);
        }
        for (j, &m) in demand.iter().enumerate() {
            s.flow[n1 + j] = m;
            s.pi[n1 + j] = art_cost;
            s.add_child(root, n1 + j);
        }
        s
    }

    #[inline]
    fn root(&self) -> usize {
        self.n1 + self.n2
    }

    #[inline]
    fn is_source(&self, u: usize) -> bool {
        u < self.n1
    }

    /// Cost of the tree arc between `u` and its parent.
    #[inline]
    fn pred_cost(&self, u: usize) -> f64 {
        let p = self.parent[u];
        if p == self.root() {
            self.art_cost
        } else if self.is_source(u) {
            self.cost[u * self.n2 + (p - self.n1)]
        } else {
            self.cost[p * self.n2 + (u - self.n1)]
        }
    }

    fn add_child(&mut self, p: usize, c: usize) {
        self.child_pos[c] = self.children[p].len();
        self.children[p].push(c);
    }

    fn remove_child(&mut self, p: usize, c: usize) {
        let pos = self.child_pos[c];
        self.children[p].swap_remove(pos);
        if pos < self.children[p].len() {
            let moved = self.children[p][pos];
            self.child_pos[moved] = pos;
        }
    }

    /// Block-search pricing: the most negative reduced cost in the first
    /// block that has one.
    fn find_entering(&mut self) -> Option<(usize, usize)> {
        let total = self.n1 * self.n2;
        let n2 = self.n2;
        let mut best = -self.eps;
        let mut found = None;
        let mut scanned = 0;
        let mut in_block = 0;
        let mut a = self.next_arc;
        let (mut i, mut j) = (a / n2, a % n2);
        while scanned < total {
            let rc = self.cost[a] + self.pi[i] - self.pi[self.n1 + j];
            if rc < best {
                best = rc;
                found = Some((i, j));
            }
            scanned += 1;
            in_block += 1;
            a += 1;
            j += 1;
            if j == n2 {
                j = 0;
                i += 1;
                if a == total {
                    a = 0;
                    i = 0;
                }
            }
            if in_block == self.block {
                if found.is_some() {
                    self.next_arc = a;
                    return found;
                }
                in_block = 0;
            }
        }
        self.next_arc = a;
        found
    }

    fn join(&self, mut a: usize, mut b: usize) -> usize {
        while a != b {
            if self.depth[a] > self.depth[b] {
                a = self.parent[a];
            } else if self.depth[b] > self.depth[a] {
                b = self.parent[b];
            } else {
                a = self.parent[a];
                b = self.parent[b];
            }
        }
        a
    }

    fn pivot(&mut self, i: usize, j: usize) {
        let first = i;
        let second = self.n1 + j;
        let join = self.join(first, second);

        // leaving arc: first side with `<`, second side with `<=`
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut second_side = false;
        let mut u = first;
        while u != join {
            if self.is_source(u) && self.flow[u] < delta {
                delta = self.flow[u];
                u_out = u;
            }
            u = self.parent[u];
        }
        u = second;
        while u != join {
            if !self.is_source(u) && self.flow[u] <= delta {
                delta = self.flow[u];
                u_out = u;
                second_side = true;
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != NONE, "unbounded cycle in a balanced problem");

        if delta > 0.0 {
            u = first;
            while u != join {
                if self.is_source(u) {
                    self.flow[u] -= delta;
                } else {
                    self.flow[u] += delta;
                }
                u = self.parent[u];
            }
            u = second;
            while u != join {
                if self.is_source(u) {
                    self.flow[u] += delta;
                } else {
                    self.flow[u] -= delta;
                }
                u = self.parent[u];
            }
        }

        let (u_in, v_in) = if second_side { (second, first) } else { (first, second) };
        let c = self.cost[i * self.n2 + j];
        let sigma = if self.is_source(u_in) {
            self.pi[v_in] - c - self.pi[u_in]
        } else {
            self.pi[v_in] + c - self.pi[u_in]
        };

        // reverse the path u_in → u_out and hang it below v_in
        let mut u = u_in;
        let mut new_parent = v_in;
        let mut new_flow = delta;
        loop {
            let old_parent = self.parent[u];
            let old_flow = self.flow[u];
            self.remove_child(old_parent, u);
            self.parent[u] = new_parent;
            self.flow[u] = new_flow;
            self.add_child(new_parent, u);
            if u == u_out {
                break;
            }
            new_parent = u;
            new_flow = old_flow;
            u = old_parent;
        }

        // shift potentials and depths over the moved subtree
        self.stack.clear();
        self.stack.push(u_in);
        while let Some(w) = self.stack.pop() {
            self.pi[w] += sigma;
            self.depth[w] = self.depth[self.parent[w]] + 1;
            for k in 0..self.children[w].len() {
                let c = self.children[w][k];
                self.stack.push(c);
            }
        }
    }

    /// Rebuilds all potentials from the tree, discarding accumulated drift.
    fn refresh_potentials(&mut self) {
        let root = self.root();
        self.pi[root] = 0.0;
        self.stack.clear();
        self.stack.extend(self.children[root].iter().copied());
        while let Some(w) = self.stack.pop() {
            let c = self.pred_cost(w);
            let p = self.parent[w];
            self.pi[w] = if self.is_source(w) { self.pi[p] - c } else { self.pi[p] + c };
            for k in 0..self.children[w].len() {
                let c = self.children[w][k];
                self.stack.push(c);
            }
        }
    }

    fn run(&mut self, max_iter: usize) -> Result<usize> {
        let mut iter = 0;
        loop {
            let entering = match self.find_entering() {
                Some(arc) => arc,
                None => {
                    // drift in the incremental potentials may hide an improving arc
                    self.refresh_potentials();
                    match self.find_entering() {
                        Some(arc) => arc,
                        None => return Ok(iter),
                    }
                }
            };
            self.pivot(entering.0, entering.1);
            iter += 1;
            if iter >= max_iter {
                return Err(Error::Solver(format!("network simplex hit the pivot cap {max_iter}")));
            }
        }
    }
}

fn support(w: &[f64]) -> Vec<usize> {
    (0..w.len()).filter(|&i| w[i] > 0.0).collect()
}

/// Exact optimal transport for the given cost table. Zero-mass points are
/// pruned before solving.
pub fn solve_ot_exact(mu: &ProbMeasure, nu: &ProbMeasure, cost: &CostMatrix) -> Result<OTResult> {
    solve_transport(mu.weights(), nu.weights(), cost, 1)
}

/// [`solve_ot_exact`] on raw marginals; `p` only sets the reported root.
pub fn solve_transport(mu: &[f64], nu: &[f64], cost: &CostMatrix, p: u32) -> Result<OTResult> {
    check_marginals(mu, nu, cost)?;
    let (rows, cols) = (support(mu), support(nu));
    let supply: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let sub: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| cost.get(i, j))).collect();

    let mut ns = NetworkSimplex::new(&supply, &demand, &sub);
    let n = rows.len() + cols.len();
    let iterations = ns.run(100 * n * n + 10_000)?;

    let (n1, n2) = (rows.len(), cols.len());
    let mut entries = Vec::new();
    for u in 0..n1 + n2 {
        let parent = ns.parent[u];
        if parent == ns.root() || ns.flow[u] <= 0.0 {
            continue;
        }
        let (i, j) = if u < n1 { (u, parent - n1) } else { (parent, u - n1) };
        entries.push((rows[i], cols[j], ns.flow[u]));
    }
    entries.sort_by_key(|e| (e.0, e.1));
    let coupling = Coupling { entries, source: mu.to_vec(), target: nu.to_vec() };
    let primal = coupling.cost(cost);
    let dual_terms: Vec<f64> = (0..n2)
        .map(|j| demand[j] * ns.pi[n1 + j])
        .chain((0..n1).map(|i| -supply[i] * ns.pi[i]))
        .collect();
    let dual = pairwise_sum(&dual_terms);
    let value = if p == 1 { primal.max(0.0) } else { primal.max(0.0).powf(1.0 / p as f64) };
    Ok(OTResult {
        cost: primal,
        value,
        raw_cost: None,
        coupling,
        diagnostics: SolverDiagnostics {
            iterations,
            duality_gap: (primal - dual).abs(),
            marginal_violation: 0.0,
            converged: true,
        },
    })
}

/// Costs `d^p` between the supports of `mu` and `nu`, as an exact problem
/// on the supports only.
fn support_problem<S: MetricMeasure + ?Sized>(
    space: &S,
    mu: &ProbMeasure,
    nu: &ProbMeasure,
    p: u32,
) -> Result<(Vec<usize>, Vec<usize>, OTResult)> {
    if mu.len() != space.len() || nu.len() != space.len() {
        return Err(Error::DimensionMismatch { expected: space.len(), got: mu.len().max(nu.len()) });
    }
    let (rows, cols) = (support(mu.weights()), support(nu.weights()));
    let a: Vec<f64> = rows.iter().map(|&i| mu.weights()[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu.weights()[j]).collect();
    let cost = CostMatrix::from_fn(rows.len(), cols.len(), |i, j| space.dist(rows[i], cols[j]).powi(p as i32))?;
    let res = solve_transport(&a, &b, &cost, p)?;
    Ok((rows, cols, res))
}

/// `W_p` on a space by the exact solver, `p ∈ {1, 2}`. The returned
/// coupling uses indices of the space.
pub fn wasserstein<S: MetricMeasure + ?Sized>(space: &S, mu: &ProbMeasure, nu: &ProbMeasure, p: u32) -> Result<OTResult> {
    if p != 1 && p != 2 {
        return Err(invalid("p", "only W_1 and W_2 are supported"));
    }
    let (rows, cols, mut res) = support_problem(space, mu, nu, p)?;
    for e in res.coupling.entries.iter_mut() {
        e.0 = rows[e.0];
        e.1 = cols[e.1];
    }
    res.coupling.source = mu.weights().to_vec();
    res.coupling.target = nu.weights().to_vec();
    Ok(res)
}

pub fn w2<S: MetricMeasure + ?Sized>(space: &S, mu: &ProbMeasure, nu: &ProbMeasure) -> Result<f64> {
    Ok(wasserstein(space, mu, nu, 2)?.value)
}

pub fn w1<S: MetricMeasure + ?Sized>(space: &S, mu: &ProbMeasure, nu: &ProbMeasure) -> Result<f64> {
    Ok(wasserstein(space, mu, nu, 1)?.value)
}

/// `W₂` between two weighted point sets on the real line by the monotone
/// (quantile) coupling. Weights are normalized separately.
pub fn w2_line(x: &[f64], a: &[f64], y: &[f64], b: &[f64]) -> Result<f64> {
    let sorted = |p: &[f64], w: &[f64]| -> Result<Vec<(f64, f64)>> {
        if p.len() != w.len() || p.is_empty() {
            return Err(Error::DimensionMismatch { expected: p.len(), got: w.len() });
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || p.iter().any(|v| !v.is_finite()) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        let total = pairwise_sum(w);
        if !(total > 0.0) {
            return Err(invalid("weights", "total mass must be positive"));
        }
        let mut v: Vec<(f64, f64)> = p.iter().zip(w).filter(|(_, m)| **m > 0.0).map(|(q, m)| (*q, m / total)).collect();
        v.sort_by(|l, r| l.0.total_cmp(&r.0));
        Ok(v)
    };
    let (u, v) = (sorted(x, a)?, sorted(y, b)?);
    let (mut i, mut j) = (0, 0);
    let (mut left_u, mut left_v) = (u[0].1, v[0].1);
    let mut terms = Vec::with_capacity(u.len() + v.len());
    loop {
        let m = left_u.min(left_v);
        let d = u[i].0 - v[j].0;
        terms.push(m * d * d);
        left_u -= m;
        left_v -= m;
        if left_u <= 0.0 {
            i += 1;
            if i == u.len() {
                break;
            }
            left_u = u[i].1;
        }
        if left_v <= 0.0 {
            j += 1;
            if j == v.len() {
                break;
            }
            left_v = v[j].1;
        }
    }
    Ok(pairwise_sum(&terms).max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Sinkhorn

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic plan by log-domain Sinkhorn iterations, followed by the
/// Altschuler–Weed–Rigollet rounding onto the exact marginals. The
/// reported `cost` is the rounded plan's cost, an upper bound on the exact
/// optimum; `raw_cost` is the unrounded plan's. Non-convergence is
/// reported in the diagnostics, not as an error.
pub fn sinkhorn(mu: &ProbMeasure, nu: &ProbMeasure, cost: &CostMatrix, epsilon: f64, max_iter: usize) -> Result<OTResult> {
    sinkhorn_with_tol(mu, nu, cost, epsilon, max_iter, 1e-12)
}

pub fn sinkhorn_with_tol(
    mu: &ProbMeasure,
    nu: &ProbMeasure,
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<OTResult> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    let (a, b) = (mu.weights(), nu.weights());
    check_marginals(a, b, cost)?;
    let (n1, n2) = (a.len(), b.len());
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n1];
    let mut g = vec![0.0; n2];
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut p = vec![0.0; n1 * n2];
        p.par_chunks_mut(n2).enumerate().for_each(|(i, row)| {
            for j in 0..n2 {
                row[j] = ((f[i] + g[j] - cost.get(i, j)) / epsilon).exp();
            }
        });
        p
    };
    let violation = |p: &[f64]| -> f64 {
        let mut v = 0.0;
        for i in 0..n1 {
            v += (p[i * n2..(i + 1) * n2].iter().sum::<f64>() - a[i]).abs();
        }
        for j in 0..n2 {
            v += ((0..n1).map(|i| p[i * n2 + j]).sum::<f64>() - b[j]).abs();
        }
        v
    };
    let mut iterations = 0;
    let mut viol = f64::INFINITY;
    while iterations < max_iter {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            *fi = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                epsilon * la[i] - epsilon * log_sum_exp((0..n2).map(|j| (g[j] - cost.get(i, j)) / epsilon))
            };
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                epsilon * lb[j] - epsilon * log_sum_exp((0..n1).map(|i| (f[i] - cost.get(i, j)) / epsilon))
            };
        });
        iterations += 1;
        if iterations % 10 == 0 || iterations == max_iter {
            viol = violation(&plan(&f, &g));
            if viol <= tol {
                break;
            }
        }
    }
    let raw = plan(&f, &g);
    viol = viol.min(violation(&raw));
    let raw_cost = pairwise_sum(&raw.iter().zip(&cost.data).map(|(p, c)| p * c).collect::<Vec<_>>());

    // rounding onto the exact marginals
    let mut x = raw;
    for i in 0..n1 {
        let r: f64 = x[i * n2..(i + 1) * n2].iter().sum();
        if r > a[i] {
            let s = a[i] / r;
            x[i * n2..(i + 1) * n2].iter_mut().for_each(|v| *v *= s);
        }
    }
    for j in 0..n2 {
        let c: f64 = (0..n1).map(|i| x[i * n2 + j]).sum();
        if c > b[j] {
            let s = b[j] / c;
            (0..n1).for_each(|i| x[i * n2 + j] *= s);
        }
    }
    let err_r: Vec<f64> = (0..n1).map(|i| (a[i] - x[i * n2..(i + 1) * n2].iter().sum::<f64>()).max(0.0)).collect();
    let err_c: Vec<f64> = (0..n2).map(|j| (b[j] - (0..n1).map(|i| x[i * n2 + j]).sum::<f64>()).max(0.0)).collect();
    let norm: f64 = err_r.iter().sum();
    if norm > 0.0 {
        for i in 0..n1 {
            for j in 0..n2 {
                x[i * n2 + j] += err_r[i] * err_c[j] / norm;
            }
        }
    }
    let mut entries = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if x[i * n2 + j] > 0.0 {
                entries.push((i, j, x[i * n2 + j]));
            }
        }
    }
    let coupling = Coupling { entries, source: a.to_vec(), target: b.to_vec() };
    let rounded = coupling.cost(cost);
    Ok(OTResult {
        cost: rounded,
        value: rounded.max(0.0).sqrt(),
        raw_cost: Some(raw_cost),
        coupling,
        diagnostics: SolverDiagnostics {
            iterations,
            duality_gap: f64::NAN,
            marginal_violation: viol,
            converged: viol <= tol,
        },
    })
}

// ---------------------------------------------------------------------------
// Cone bounds

/// `∫∫ d_C² d(ν_p ⊗ ν_o)` on a flat cone, factorized through the law of
/// cosines into radial second moments and a base cross term; an upper bound
/// for `W_2(ν_p, ν_o)²`.
pub fn product_coupling_cost(cone: &ConeSpace, nu_p: &ProbMeasure, nu_o: &ProbMeasure) -> Result<f64> {
    if cone.curvature() != 0.0 {
        return Err(Error::CurvedCone(cone.curvature()));
    }
    let n = cone.len();
    if nu_p.len() != n || nu_o.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: nu_p.len().max(nu_o.len()) });
    }
    let nb = cone.base().len();
    let moments = |mu: &ProbMeasure| -> (f64, Vec<f64>) {
        let mut second = Vec::with_capacity(n);
        let mut first = vec![0.0; nb];
        for (i, &w) in mu.weights().iter().enumerate() {
            let r = cone.radius(i);
            second.push(w * r * r);
            if r > 0.0 {
                first[cone.base_of(i)] += w * r;
            }
        }
        (pairwise_sum(&second), first)
    };
    let (sp, ap) = moments(nu_p);
    let (so, ao) = moments(nu_o);
    let base = cone.base();
    let cross: Vec<f64> = (0..nb)
        .map(|x| {
            if ap[x] == 0.0 {
                return 0.0;
            }
            let row: Vec<f64> = (0..nb).map(|y| ao[y] * base.dist(x, y).min(PI).cos()).collect();
            ap[x] * pairwise_sum(&row)
        })
        .collect();
    Ok(sp + so - 2.0 * pairwise_sum(&cross))
}

/// `max |φ(p) − φ(q)| / d(p, q)` over all pairs; `0/0` counts as 0.
pub fn verify_lipschitz<S: MetricMeasure + ?Sized>(phi: &[f64], space: &S) -> f64 {
    let n = space.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut worst: f64 = 0.0;
            for j in i + 1..n {
                let dphi = (phi[i] - phi[j]).abs();
                if dphi == 0.0 {
                    continue;
                }
                let d = space.dist(i, j);
                worst = worst.max(if d > 0.0 { dphi / d } else { f64::INFINITY });
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Tolerance added to the Lipschitz constant when certifying potentials.
pub const LIPSCHITZ_SLACK: f64 = 1e-9;

/// Kantorovich–Rubinstein lower bound `(∫φ dμ − ∫φ dν) / L ≤ W_1(μ, ν)`.
pub fn kr_dual_bound<S: MetricMeasure + ?Sized>(
    space: &S,
    mu: &ProbMeasure,
    nu: &ProbMeasure,
    phi: &[f64],
    lip_const: f64,
) -> Result<f64> {
    if phi.len() != space.len() {
        return Err(Error::DimensionMismatch { expected: space.len(), got: phi.len() });
    }
    if !(lip_const > 0.0) {
        return Err(invalid("lip_const", "must be positive"));
    }
    let ratio = verify_lipschitz(phi, space);
    if ratio > lip_const + LIPSCHITZ_SLACK {
        return Err(Error::Lipschitz { ratio, bound: lip_const });
    }
    Ok(kr_value(mu, nu, phi, lip_const))
}

/// [`kr_dual_bound`] for a potential already certified.
pub fn kr_value(mu: &ProbMeasure, nu: &ProbMeasure, phi: &[f64], lip_const: f64) -> f64 {
    (mu.integrate(phi) - nu.integrate(phi)) / lip_const
}

/// `φ(s, y) = s cos d_X(x0, y)` with `φ(o) = 0`, certified 1-Lipschitz for
/// the cone distance.
pub fn cone_dual_function(cone: &ConeSpace, x0: usize) -> Result<Vec<f64>> {
    let phi = cone_dual_values(cone, x0)?;
    let ratio = verify_lipschitz(&phi, cone);
    if ratio > 1.0 + LIPSCHITZ_SLACK {
        return Err(Error::Lipschitz { ratio, bound: 1.0 });
    }
    Ok(phi)
}

/// [`cone_dual_function`] without the all-pairs certification.
pub fn cone_dual_values(cone: &ConeSpace, x0: usize) -> Result<Vec<f64>> {
    if cone.curvature() != 0.0 {
        return Err(Error::CurvedCone(cone.curvature()));
    }
    let base = cone.base();
    if x0 >= base.len() {
        return Err(invalid("x0", "base point out of range"));
    }
    let diam = base.diameter();
    if diam > PI + crate::functionals::DIAMETER_TOL {
        return Err(Error::DiameterExceeded { value: diam });
    }
    Ok((0..cone.len())
        .map(|i| {
            let r = cone.radius(i);
            if r == 0.0 {
                0.0
            } else {
                r * base.dist(x0, cone.base_of(i)).cos()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cone, GridSpec};
    use crate::mmspace::{circle, FiniteMMSpace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_points() -> FiniteMMSpace {
        FiniteMMSpace::new(vec![0.0, 1.0, 1.0, 0.0], vec![0.5, 0.5]).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, n: usize) -> ProbMeasure {
        ProbMeasure::normalized((0..n).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
    }

    /// Brute force over a fine grid of the single free parameter of a 2×2 plan.
    fn two_by_two_oracle(a: [f64; 2], b: [f64; 2], c: [f64; 4]) -> f64 {
        let lo = (a[0] - b[1]).max(0.0);
        let hi = a[0].min(b[0]);
        // cost is linear in x00, so an endpoint is optimal
        [lo, hi]
            .iter()
            .map(|&x| {
                let p = [x, a[0] - x, b[0] - x, a[1] - b[0] + x];
                p.iter().zip(c).map(|(p, c)| p * c).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn identical_measures_cost_nothing() {
        let c = circle(2.0 * PI, 12).unwrap();
        let mu = ProbMeasure::from_space(&c);
        let r = wasserstein(&c, &mu, &mu, 2).unwrap();
        assert!(r.cost.abs() < 1e-15);
        assert!(w2(&c, &mu, &mu).unwrap() < 1e-12);
    }

    #[test]
    fn diracs() {
        let c = circle(2.0 * PI, 12).unwrap();
        let (x, y) = (ProbMeasure::dirac(12, 1), ProbMeasure::dirac(12, 4));
        assert!((w2(&c, &x, &y).unwrap() - c.dist(1, 4)).abs() < 1e-14);
        assert!((w1(&c, &x, &y).unwrap() - c.dist(1, 4)).abs() < 1e-14);
    }

    #[test]
    fn half_mass_move() {
        let s = two_points();
        let mu = ProbMeasure::new(vec![0.5, 0.5]).unwrap();
        let nu = ProbMeasure::dirac(2, 0);
        assert!((w1(&s, &mu, &nu).unwrap() - 0.5).abs() < 1e-15);
        assert!((w2(&s, &mu, &nu).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn random_two_by_two_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a0 = rng.random_range(0.05..0.95);
            let b0 = rng.random_range(0.05..0.95);
            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..3.0));
            let cost = CostMatrix::new(2, 2, c.to_vec()).unwrap();
            let r = solve_transport(&[a0, 1.0 - a0], &[b0, 1.0 - b0], &cost, 1).unwrap();
            let want = two_by_two_oracle([a0, 1.0 - a0], [b0, 1.0 - b0], c);
            assert!((r.cost - want).abs() < 1e-12, "{} vs {want}", r.cost);
            assert!(r.coupling.marginal_error() < 1e-12);
        }
    }

    #[test]
    fn line_w2_matches_exact_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let (n1, n2) = (rng.random_range(1..25), rng.random_range(1..25));
            let x: Vec<f64> = (0..n1).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n2).map(|_| rng.random_range(-1.0..3.0)).collect();
            let a = random_measure(&mut rng, n1);
            let b = random_measure(&mut rng, n2);
            let cost = CostMatrix::from_fn(n1, n2, |i, j| (x[i] - y[j]).powi(2)).unwrap();
            let exact = solve_ot_exact(&a, &b, &cost).unwrap().cost.sqrt();
            let line = w2_line(&x, a.weights(), &y, b.weights()).unwrap();
            assert!((exact - line).abs() < 1e-10, "{exact} vs {line}");
        }
        let shifted = w2_line(&[0.0, 1.0], &[1.0, 3.0], &[0.5, 1.5], &[2.0, 6.0]).unwrap();
        assert!((shifted - 0.5).abs() < 1e-15);
        assert!(w2_line(&[0.0], &[0.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn duality_gap_closes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (n1, n2) = (rng.random_range(1..40), rng.random_range(1..40));
            let a = random_measure(&mut rng, n1);
            let b = random_measure(&mut rng, n2);
            let cost = CostMatrix::from_fn(n1, n2, |_, _| 0.0).unwrap();
            let data: Vec<f64> = (0..n1 * n2).map(|_| rng.random_range(0.0..5.0)).collect();
            let cost = CostMatrix { data, ..cost };
            let r = solve_ot_exact(&a, &b, &cost).unwrap();
            assert!(r.diagnostics.duality_gap < 1e-9, "{:?}", r.diagnostics);
            assert!(r.coupling.marginal_error() < MARGINAL_TOL);
            assert!(r.coupling.entries.iter().all(|e| e.2 > 0.0));
        }
    }

    #[test]
    fn zero_mass_points_are_pruned() {
        let c = circle(2.0 * PI, 8).unwrap();
        let mu = ProbMeasure::new(vec![0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let nu = ProbMeasure::new(vec![0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = wasserstein(&c, &mu, &nu, 1).unwrap();
        assert!((r.cost - PI / 4.0).abs() < 1e-14);
        assert!(r.coupling.entries.iter().all(|&(i, j, _)| mu.weights()[i] > 0.0 && nu.weights()[j] > 0.0));
    }

    #[test]
    fn sinkhorn_large_epsilon_is_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_measure(&mut rng, 6), random_measure(&mut rng, 5));
        let cost = CostMatrix::from_fn(6, 5, |i, j| ((i * 5 + j) % 7) as f64 / 7.0).unwrap();
        let r = sinkhorn(&a, &b, &cost, 1e6, 200).unwrap();
        let d = r.coupling.dense();
        for i in 0..6 {
            for j in 0..5 {
                assert!((d[i * 5 + j] - a.weights()[i] * b.weights()[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sinkhorn_symmetric_fixed_point() {
        let c = circle(2.0 * PI, 10).unwrap();
        let cost = CostMatrix::from_space(&c, 2).unwrap();
        let mu = ProbMeasure::uniform(10);
        let r = sinkhorn(&mu, &mu, &cost, 0.5, 5000).unwrap();
        let d = r.coupling.dense();
        for i in 0..10 {
            for j in 0..10 {
                assert!((d[i * 10 + j] - d[j * 10 + i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sinkhorn_rounded_cost_upper_bounds_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (a, b) = (random_measure(&mut rng, 20), random_measure(&mut rng, 20));
            let data: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..1.0)).collect();
            let cost = CostMatrix::new(20, 20, data).unwrap();
            let exact = solve_ot_exact(&a, &b, &cost).unwrap();
            let sk = sinkhorn(&a, &b, &cost, 0.05, 500).unwrap();
            assert!(sk.coupling.marginal_error() < 1e-12);
            assert!(sk.cost >= exact.cost - 1e-12, "{} < {}", sk.cost, exact.cost);
        }
    }

    #[test]
    fn lipschitz_checks() {
        let c = circle(2.0 * PI, 16).unwrap();
        assert_eq!(verify_lipschitz(&[3.0; 16], &c), 0.0);
        let phi: Vec<f64> = (0..16).map(|i| c.dist(5, i)).collect();
        assert!(verify_lipschitz(&phi, &c) <= 1.0 + 1e-12);
        let (x, y) = (ProbMeasure::dirac(16, 2), ProbMeasure::dirac(16, 9));
        let b = kr_dual_bound(&c, &x, &y, &phi, 1.0).unwrap();
        assert!(b.abs() <= w1(&c, &x, &y).unwrap() + 1e-12);
        let steep: Vec<f64> = phi.iter().map(|v| 2.0 * v).collect();
        assert!(matches!(kr_dual_bound(&c, &x, &y, &steep, 1.0), Err(Error::Lipschitz { .. })));
        assert_eq!(kr_dual_bound(&c, &x, &y, &[1.0; 16], 1.0).unwrap(), 0.0);
    }

    fn small_cone() -> ConeSpace {
        build_cone(&circle(4.0 * PI / 3.0, 6).unwrap(), 0.0, 1.0, &GridSpec::Geometric { count: 4, r_min: 0.2, r_max: 2.0 }).unwrap()
    }

    #[test]
    fn product_cost_simple_cases() {
        let cone = small_cone();
        let o = ProbMeasure::dirac(cone.len(), cone.vertex());
        assert_eq!(product_coupling_cost(&cone, &o, &o).unwrap(), 0.0);
        let p = cone.index(2, 3);
        let r = cone.radius(p);
        let v = product_coupling_cost(&cone, &ProbMeasure::dirac(cone.len(), p), &o).unwrap();
        assert!((v - r * r).abs() < 1e-14);
    }

    #[test]
    fn product_cost_matches_brute_force_and_bounds_w2() {
        let cone = small_cone();
        let n = cone.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (p, q) = (random_measure(&mut rng, n), random_measure(&mut rng, n));
            let fast = product_coupling_cost(&cone, &p, &q).unwrap();
            let mut brute = 0.0;
            for i in 0..n {
                for j in 0..n {
                    brute += p.weights()[i] * q.weights()[j] * cone.dist(i, j).powi(2);
                }
            }
            assert!((fast - brute).abs() < 1e-9);
            let w = w2(&cone, &p, &q).unwrap();
            assert!(w * w <= fast + 1e-12);
        }
    }

    #[test]
    fn cone_dual_is_one_lipschitz() {
        let base = circle(2.0 * PI, 64).unwrap();
        let cone = build_cone(&base, 0.0, 1.0, &GridSpec::Geometric { count: 32, r_min: 0.05, r_max: 3.0 }).unwrap();
        let phi = cone_dual_function(&cone, 0).unwrap();
        assert_eq!(phi[cone.vertex()], 0.0);
        let p = cone.index(5, 0);
        assert!((phi[p] - cone.radius(p)).abs() < 1e-15);
        let ratio = verify_lipschitz(&phi, &cone);
        assert!((ratio - 1.0).abs() < 1e-9, "{ratio}");
        let curved = build_cone(&base, 1.0, 1.0, &GridSpec::Linear { count: 4, r_max: PI }).unwrap();
        assert!(matches!(cone_dual_function(&curved, 0), Err(Error::CurvedCone(_))));
    }

    #[test]
    fn cone_dual_sandwich() {
        let cone = small_cone();
        let phi = cone_dual_function(&cone, 2).unwrap();
        let n = cone.len();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let (p, q) = (random_measure(&mut rng, n), random_measure(&mut rng, n));
            let g = kr_dual_bound(&cone, &p, &q, &phi, 1.0).unwrap();
            let a = w1(&cone, &p, &q).unwrap();
            let b = w2(&cone, &p, &q).unwrap();
            let up = product_coupling_cost(&cone, &p, &q).unwrap().sqrt();
            assert!(g <= a + 1e-9 && a <= b + 1e-12 && b <= up + 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn w2_is_a_metric(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = circle(rng.random_range(1.0..6.0), 9).unwrap();
                let (a, b, d) = (random_measure(&mut rng, 9), random_measure(&mut rng, 9), random_measure(&mut rng, 9));
                let ab = w2(&c, &a, &b).unwrap();
                let ba = w2(&c, &b, &a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-9);
                prop_assert!(ab <= w2(&c, &a, &d).unwrap() + w2(&c, &d, &b).unwrap() + 1e-8);
                prop_assert!(w1(&c, &a, &b).unwrap() <= ab + 1e-12);
            }
        }
    }
}
